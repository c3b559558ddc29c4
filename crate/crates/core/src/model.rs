//! The three-branch classifier: configuration, graph construction, static
//! shape trace, and parameter audit.
//!
//! Each branch stacks blocks of `conv (valid, k x k) -> relu -> avgpool
//! (p x p, stride p) -> batchnorm`, then flattens and applies dropout. The
//! branch outputs are concatenated and fed to a dense head
//! `256 -> relu -> dropout -> 128 -> relu -> dropout -> classes -> softmax`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, GraphBuilder, NodeId, OpKind};
use crate::ops::{ConvAttrs, PoolAttrs, PoolMode, DEFAULT_MOMENTUM, DEFAULT_NORM_EPSILON};
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Published parameter total of the full model.
pub const FULL_PARAM_TOTAL: u64 = 7_866_819;

/// Positive rational multiplier applied to every branch filter count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FilterScale {
    num: u64,
    den: u64,
}

impl FilterScale {
    pub const ONE: FilterScale = FilterScale { num: 1, den: 1 };

    pub fn new(num: u64, den: u64) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::Config(format!("filter scale {num}/{den} must be positive")));
        }
        let g = gcd(num, den);
        Ok(FilterScale {
            num: num / g,
            den: den / g,
        })
    }

    /// `floor(filters * scale)`.
    pub fn apply(&self, filters: usize) -> usize {
        ((filters as u128 * self.num as u128) / self.den as u128) as usize
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl Default for FilterScale {
    fn default() -> Self {
        FilterScale::ONE
    }
}

impl fmt::Display for FilterScale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

impl FromStr for FilterScale {
    type Err = Error;

    /// Accepts `p/q`, an integer, or a finite decimal such as `0.125`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("cannot parse filter scale {s:?}"));
        if let Some((p, q)) = s.split_once('/') {
            let p = p.trim().parse().map_err(|_| bad())?;
            let q = q.trim().parse().map_err(|_| bad())?;
            return FilterScale::new(p, q);
        }
        let (int, frac) = s.split_once('.').unwrap_or((s, ""));
        if int.is_empty() && frac.is_empty() || frac.len() > 18 {
            return Err(bad());
        }
        let digits = format!("{int}{frac}");
        if !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        let num: u64 = digits.parse().map_err(|_| bad())?;
        FilterScale::new(num, 10u64.pow(frac.len() as u32))
    }
}

/// One convolutional branch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchSpec {
    pub kernel: usize,
    pub pool_window: usize,
    pub filters: Vec<usize>,
}

impl BranchSpec {
    pub fn new(kernel: usize, pool_window: usize, filters: Vec<usize>) -> Self {
        BranchSpec {
            kernel,
            pool_window,
            filters,
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        let tag = format!("branch {}", index + 1);
        if self.kernel < 3 || self.kernel % 2 == 0 {
            return Err(Error::Config(format!("{tag}: kernel {} must be odd and >= 3", self.kernel)));
        }
        if self.pool_window < 2 {
            return Err(Error::Config(format!("{tag}: pool window {} must be >= 2", self.pool_window)));
        }
        if self.filters.is_empty() {
            return Err(Error::Config(format!("{tag}: needs at least one block")));
        }
        if self.filters.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Config(format!("{tag}: filter counts {:?} must be nondecreasing", self.filters)));
        }
        Ok(())
    }
}

/// Declarative description of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Per-sample input `[c, h, w]`.
    pub input: [usize; 3],
    pub branches: Vec<BranchSpec>,
    pub head_widths: Vec<usize>,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub filter_scale: FilterScale,
}

impl ModelConfig {
    /// Full-width architecture on 100x100 RGB input.
    pub fn full() -> Self {
        ModelConfig {
            input: [3, 100, 100],
            branches: vec![
                BranchSpec::new(3, 2, vec![32, 64, 128, 256, 512]),
                BranchSpec::new(5, 3, vec![128, 256, 512]),
                BranchSpec::new(7, 5, vec![128, 256]),
            ],
            head_widths: vec![256, 128],
            num_classes: 3,
            dropout_rate: 0.5,
            filter_scale: FilterScale::ONE,
        }
    }

    /// Full architecture with scaled filter counts.
    pub fn scaled(filter_scale: FilterScale) -> Self {
        ModelConfig {
            filter_scale,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.contains(&0) {
            return Err(Error::Config(format!("input extents {:?} must be positive", self.input)));
        }
        if self.branches.is_empty() {
            return Err(Error::Config("model needs at least one branch".into()));
        }
        for (i, b) in self.branches.iter().enumerate() {
            b.validate(i)?;
        }
        if self.head_widths.contains(&0) {
            return Err(Error::Config("head widths must be positive".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} must be in [0,1)", self.dropout_rate)));
        }
        Ok(())
    }

    /// Filter counts after scaling; a count that rounds to zero is an error
    /// naming the block.
    pub fn scaled_filters(&self, branch: usize) -> Result<Vec<usize>> {
        self.branches[branch]
            .filters
            .iter()
            .enumerate()
            .map(|(j, &f)| match self.filter_scale.apply(f) {
                0 => Err(Error::Config(format!(
                    "b{}.block{}: {f} filters x {} collapses to zero",
                    branch + 1,
                    j + 1,
                    self.filter_scale
                ))),
                n => Ok(n),
            })
            .collect()
    }

    /// Canonical text identifying the architecture; stored with weights.
    pub fn fingerprint(&self) -> String {
        let branches: Vec<String> = self
            .branches
            .iter()
            .map(|b| {
                let f: Vec<String> = b.filters.iter().map(usize::to_string).collect();
                format!("k{}p{}f{}", b.kernel, b.pool_window, f.join(","))
            })
            .collect();
        let head: Vec<String> = self.head_widths.iter().map(usize::to_string).collect();
        format!(
            "adnet/v1 input={}x{}x{} branches={} head={} classes={} dropout={} scale={}",
            self.input[0],
            self.input[1],
            self.input[2],
            branches.join(";"),
            head.join(","),
            self.num_classes,
            self.dropout_rate,
            self.filter_scale
        )
    }
}

/// Builds the graph without parameters. Spatial collapse or a zero filter
/// count is a configuration error naming the block.
pub fn build_graph(cfg: &ModelConfig) -> Result<Graph> {
    cfg.validate()?;
    let mut b = GraphBuilder::new();
    let input = b.add("input", OpKind::Input { sample: cfg.input }, &[]);
    let mut branch_outputs = Vec::with_capacity(cfg.branches.len());
    for (bi, spec) in cfg.branches.iter().enumerate() {
        let filters = cfg.scaled_filters(bi)?;
        let (mut h, mut w) = (cfg.input[1], cfg.input[2]);
        let mut prev: NodeId = input;
        for (j, &f) in filters.iter().enumerate() {
            let tag = format!("b{}.block{}", bi + 1, j + 1);
            let conv = ConvAttrs::square(f, spec.kernel);
            let pool = PoolAttrs::square(spec.pool_window, PoolMode::Average);
            let collapse = |what: &str, h: usize, w: usize| {
                Error::Config(format!("{tag}: {what} does not fit the remaining {h}x{w} extent"))
            };
            (h, w) = conv
                .output_hw(h, w)
                .map_err(|_| collapse(&format!("{0}x{0} kernel", spec.kernel), h, w))?;
            (h, w) = pool
                .output_hw(h, w)
                .map_err(|_| collapse(&format!("{0}x{0} pool", spec.pool_window), h, w))?;
            prev = b.add(format!("{tag}.conv"), OpKind::Conv2d(conv), &[prev]);
            prev = b.add(format!("{tag}.relu"), OpKind::Relu, &[prev]);
            prev = b.add(format!("{tag}.pool"), OpKind::Pool2d(pool), &[prev]);
            prev = b.add(
                format!("{tag}.norm"),
                OpKind::BatchNorm {
                    epsilon: DEFAULT_NORM_EPSILON,
                    momentum: DEFAULT_MOMENTUM,
                },
                &[prev],
            );
        }
        let flat = b.add(format!("b{}.flatten", bi + 1), OpKind::Flatten, &[prev]);
        let drop = b.add(
            format!("b{}.dropout", bi + 1),
            OpKind::Dropout {
                rate: cfg.dropout_rate,
            },
            &[flat],
        );
        branch_outputs.push(drop);
    }
    let mut prev = b.add("concat", OpKind::Concat, &branch_outputs);
    for (i, &units) in cfg.head_widths.iter().enumerate() {
        let tag = format!("head.dense{}", i + 1);
        prev = b.add(tag, OpKind::Dense { units }, &[prev]);
        prev = b.add(format!("head.relu{}", i + 1), OpKind::Relu, &[prev]);
        prev = b.add(
            format!("head.dropout{}", i + 1),
            OpKind::Dropout {
                rate: cfg.dropout_rate,
            },
            &[prev],
        );
    }
    let logits = b.add(
        format!("head.dense{}", cfg.head_widths.len() + 1),
        OpKind::Dense {
            units: cfg.num_classes,
        },
        &[prev],
    );
    let out = b.add("softmax", OpKind::Softmax, &[logits]);
    b.build(out)
}

/// Builds the graph and a freshly initialized parameter store.
///
/// Weights are drawn from `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`;
/// biases and beta start at zero, gamma at one, moving mean 0, moving
/// variance 1.
pub fn build_adnet<T: Scalar, R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<(Graph, ParamStore<T>)> {
    let graph = build_graph(cfg)?;
    let mut store = ParamStore::new();
    for (name, shape, trainable) in graph.param_specs()? {
        let suffix = name.rsplit('.').next().unwrap_or_default();
        let tensor = match suffix {
            "weight" => {
                let (fan_in, fan_out) = match *shape.as_slice() {
                    [f, c, kh, kw] => (c * kh * kw, f * kh * kw),
                    [d_in, d_out] => (d_in, d_out),
                    _ => unreachable!("weights are rank 2 or 4"),
                };
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let len = shape.iter().product();
                let vals = (0..len)
                    .map(|_| T::from_f64(rng.random_range(-bound..bound)))
                    .collect();
                Tensor::from_vec(shape, vals)?
            }
            "gamma" | "moving_var" => Tensor::full(shape, T::ONE)?,
            _ => Tensor::zeros(shape)?,
        };
        store.insert(name, tensor, trainable)?;
    }
    Ok((graph, store))
}

/// Parameter totals. Moving statistics count as non-trainable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCount {
    pub total: u64,
    pub trainable: u64,
    pub non_trainable: u64,
}

pub fn param_count<T: Scalar>(store: &ParamStore<T>) -> ParamCount {
    let (mut trainable, mut non_trainable) = (0u64, 0u64);
    for (_, e) in store.iter() {
        if e.trainable {
            trainable += e.value.len() as u64;
        } else {
            non_trainable += e.value.len() as u64;
        }
    }
    ParamCount {
        total: trainable + non_trainable,
        trainable,
        non_trainable,
    }
}

/// Same totals computed from the graph alone, without allocating weights.
pub fn graph_param_count(graph: &Graph) -> Result<ParamCount> {
    let (mut trainable, mut non_trainable) = (0u64, 0u64);
    for (_, shape, t) in graph.param_specs()? {
        let n: u64 = shape.iter().map(|&d| d as u64).product();
        if t {
            trainable += n;
        } else {
            non_trainable += n;
        }
    }
    Ok(ParamCount {
        total: trainable + non_trainable,
        trainable,
        non_trainable,
    })
}

/// One line of the architecture table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SummaryRow {
    pub name: String,
    pub kind: &'static str,
    pub output_shape: Vec<usize>,
    pub params: u64,
}

/// One row per node with its inferred output shape (batch `n`) and the
/// number of scalars it owns.
pub fn summarize(graph: &Graph, batch: usize) -> Result<Vec<SummaryRow>> {
    let shapes = graph.infer_shapes(batch)?;
    let specs = graph.param_specs()?;
    Ok(graph
        .nodes()
        .iter()
        .map(|node| {
            let params = specs
                .iter()
                .filter(|(name, _, _)| node.param_names.contains(name))
                .map(|(_, s, _)| s.iter().map(|&d| d as u64).product::<u64>())
                .sum();
            SummaryRow {
                name: node.name.clone(),
                kind: node.kind.tag(),
                output_shape: shapes[node.id].clone(),
                params,
            }
        })
        .collect())
}

/// Renders summary rows and totals as a fixed-width table.
pub fn render_summary(rows: &[SummaryRow], count: &ParamCount) -> String {
    let mut out = String::new();
    out.push_str(&format!("{:<20} {:<10} {:<20} {:>12}\n", "layer", "kind", "output", "params"));
    out.push_str(&format!("{}\n", "-".repeat(65)));
    for r in rows {
        let shape: Vec<String> = r.output_shape.iter().map(usize::to_string).collect();
        out.push_str(&format!(
            "{:<20} {:<10} {:<20} {:>12}\n",
            r.name,
            r.kind,
            format!("[{}]", shape.join(",")),
            r.params
        ));
    }
    out.push_str(&format!("{}\n", "-".repeat(65)));
    out.push_str(&format!("total params:         {}\n", count.total));
    out.push_str(&format!("trainable params:     {}\n", count.trainable));
    out.push_str(&format!("non-trainable params: {}\n", count.non_trainable));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_scale_parsing() {
        assert_eq!("1/8".parse::<FilterScale>().unwrap(), FilterScale::new(1, 8).unwrap());
        assert_eq!("0.125".parse::<FilterScale>().unwrap(), FilterScale::new(1, 8).unwrap());
        assert_eq!("1".parse::<FilterScale>().unwrap(), FilterScale::ONE);
        assert_eq!("2/16".parse::<FilterScale>().unwrap().to_string(), "1/8");
        for bad in ["", "0", "1/0", "-1", "x", "1.2.3", "."] {
            assert!(bad.parse::<FilterScale>().is_err(), "{bad:?}");
        }
        assert_eq!(FilterScale::new(1, 8).unwrap().apply(32), 4);
        assert_eq!(FilterScale::new(1, 3).unwrap().apply(32), 10);
    }

    #[test]
    fn branch_invariants() {
        let mut cfg = ModelConfig::full();
        cfg.branches[0].kernel = 4;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::full();
        cfg.branches[1].filters = vec![256, 128];
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::full();
        cfg.dropout_rate = 1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn tiny_scale_collapses_with_block_name() {
        let cfg = ModelConfig::scaled(FilterScale::new(1, 64).unwrap());
        let err = build_graph(&cfg).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("b1.block1"), "{err}");
    }

    #[test]
    fn spatial_collapse_names_block() {
        let mut cfg = ModelConfig::full();
        cfg.branches[2].filters = vec![128, 256, 256];
        let err = build_graph(&cfg).unwrap_err();
        assert!(err.to_string().contains("b3.block3"), "{err}");
    }

    #[test]
    fn fingerprint_distinguishes_scale() {
        let a = ModelConfig::full().fingerprint();
        let b = ModelConfig::scaled(FilterScale::new(1, 8).unwrap()).fingerprint();
        assert_ne!(a, b);
        assert!(b.ends_with("scale=1/8"));
    }
}
