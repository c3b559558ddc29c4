//! Static computation graph over the layer ops, with a per-call activation
//! tape and a reverse topological sweep for gradients.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::exec::Exec;
use crate::ops::{self, ConvAttrs, DropoutMask, Mode, NormState, PoolAttrs};
use crate::params::{GradMap, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub type NodeId = usize;

/// Operation performed by a node.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    /// Image entry point with per-sample shape `[c, h, w]`.
    Input { sample: [usize; 3] },
    Conv2d(ConvAttrs),
    Relu,
    Pool2d(PoolAttrs),
    BatchNorm { epsilon: f64, momentum: f64 },
    Flatten,
    Dropout { rate: f64 },
    Concat,
    Dense { units: usize },
    Softmax,
}

impl OpKind {
    /// Parameter name suffixes owned by this kind, in storage order.
    pub fn param_suffixes(&self) -> &'static [&'static str] {
        match self {
            OpKind::Conv2d(_) | OpKind::Dense { .. } => &["weight", "bias"],
            OpKind::BatchNorm { .. } => &["gamma", "beta", "moving_mean", "moving_var"],
            _ => &[],
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            OpKind::Input { .. } => "input",
            OpKind::Conv2d(_) => "conv2d",
            OpKind::Relu => "relu",
            OpKind::Pool2d(_) => "pool2d",
            OpKind::BatchNorm { .. } => "batchnorm",
            OpKind::Flatten => "flatten",
            OpKind::Dropout { .. } => "dropout",
            OpKind::Concat => "concat",
            OpKind::Dense { .. } => "dense",
            OpKind::Softmax => "softmax",
        }
    }
}

/// Whether a parameter with this suffix is trained (moving statistics are not).
pub fn is_trainable_suffix(suffix: &str) -> bool {
    !matches!(suffix, "moving_mean" | "moving_var")
}

#[derive(Debug, Clone, PartialEq)]
pub struct OpNode {
    pub id: NodeId,
    pub name: String,
    pub kind: OpKind,
    pub inputs: Vec<NodeId>,
    pub param_names: Vec<String>,
}

impl OpNode {
    /// Node whose parameter names are derived from its own name.
    pub fn new(id: NodeId, name: impl Into<String>, kind: OpKind, inputs: Vec<NodeId>) -> Self {
        let name = name.into();
        let param_names = kind
            .param_suffixes()
            .iter()
            .map(|s| format!("{name}.{s}"))
            .collect();
        OpNode {
            id,
            name,
            kind,
            inputs,
            param_names,
        }
    }
}

/// Orders nodes so that each follows all of its inputs. Among nodes that are
/// ready at the same time, the earlier-inserted one goes first.
pub fn toposort(nodes: Vec<OpNode>) -> Result<Vec<OpNode>> {
    let mut pos: HashMap<NodeId, usize> = HashMap::with_capacity(nodes.len());
    for (i, n) in nodes.iter().enumerate() {
        if pos.insert(n.id, i).is_some() {
            return Err(Error::Construction(format!("duplicate node id {}", n.id)));
        }
    }
    let mut pending = vec![0usize; nodes.len()];
    let mut successors = vec![Vec::new(); nodes.len()];
    for (i, n) in nodes.iter().enumerate() {
        for inp in &n.inputs {
            let &p = pos.get(inp).ok_or_else(|| {
                Error::Construction(format!("node {:?} references unknown input {inp}", n.name))
            })?;
            pending[i] += 1;
            successors[p].push(i);
        }
    }
    let mut ready: BTreeSet<usize> = (0..nodes.len()).filter(|&i| pending[i] == 0).collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &s in &successors[i] {
            pending[s] -= 1;
            if pending[s] == 0 {
                ready.insert(s);
            }
        }
    }
    if order.len() != nodes.len() {
        let stuck: Vec<&str> = (0..nodes.len())
            .filter(|i| pending[*i] > 0)
            .map(|i| nodes[i].name.as_str())
            .collect();
        return Err(Error::Construction(format!("cycle detected among nodes {stuck:?}")));
    }
    let mut slots: Vec<Option<OpNode>> = nodes.into_iter().map(Some).collect();
    Ok(order.into_iter().map(|i| slots[i].take().unwrap()).collect())
}

/// Topologically ordered DAG with one input node and one output node. Node
/// ids equal their position in [`Graph::nodes`].
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    nodes: Vec<OpNode>,
    input_id: NodeId,
    output_id: NodeId,
    /// Last node reading each node's value.
    last_use: Vec<NodeId>,
}

impl Graph {
    /// Sorts, renumbers, and validates `nodes`. `output` is the id of the
    /// output node as given in `nodes`.
    pub fn new(nodes: Vec<OpNode>, output: NodeId) -> Result<Self> {
        let sorted = toposort(nodes)?;
        let remap: HashMap<NodeId, NodeId> =
            sorted.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
        let output_id = *remap
            .get(&output)
            .ok_or_else(|| Error::Construction(format!("output id {output} not in graph")))?;
        let nodes: Vec<OpNode> = sorted
            .into_iter()
            .enumerate()
            .map(|(i, mut n)| {
                n.id = i;
                n.inputs = n.inputs.iter().map(|old| remap[old]).collect();
                n
            })
            .collect();

        let inputs: Vec<NodeId> = nodes
            .iter()
            .filter(|n| matches!(n.kind, OpKind::Input { .. }))
            .map(|n| n.id)
            .collect();
        let input_id = match inputs.as_slice() {
            [only] => *only,
            _ => {
                return Err(Error::Construction(format!(
                    "graph needs exactly one input node, found {}",
                    inputs.len()
                )))
            }
        };
        for n in &nodes {
            let arity_ok = match n.kind {
                OpKind::Input { .. } => n.inputs.is_empty(),
                OpKind::Concat => !n.inputs.is_empty(),
                _ => n.inputs.len() == 1,
            };
            if !arity_ok {
                return Err(Error::Construction(format!(
                    "node {:?} ({}) has {} inputs",
                    n.name,
                    n.kind.tag(),
                    n.inputs.len()
                )));
            }
        }
        let mut last_use: Vec<NodeId> = (0..nodes.len()).collect();
        for n in &nodes {
            for &i in &n.inputs {
                last_use[i] = last_use[i].max(n.id);
            }
        }
        if nodes.iter().any(|n| n.inputs.contains(&output_id)) {
            return Err(Error::Construction("output node must not feed other nodes".into()));
        }
        let mut reached = vec![false; nodes.len()];
        reached[input_id] = true;
        for n in &nodes {
            if n.inputs.iter().any(|&i| reached[i]) {
                reached[n.id] = true;
            }
        }
        if let Some(n) = nodes.iter().find(|n| !reached[n.id]) {
            return Err(Error::Construction(format!("node {:?} is unreachable from the input", n.name)));
        }
        Ok(Graph {
            nodes,
            input_id,
            output_id,
            last_use,
        })
    }

    pub fn nodes(&self) -> &[OpNode] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &OpNode {
        &self.nodes[id]
    }

    pub fn find(&self, name: &str) -> Option<&OpNode> {
        self.nodes.iter().find(|n| n.name == name)
    }

    pub fn input_id(&self) -> NodeId {
        self.input_id
    }

    pub fn output_id(&self) -> NodeId {
        self.output_id
    }

    /// The node feeding the final softmax, or the output itself when the
    /// graph does not end in a softmax.
    pub fn logits_id(&self) -> NodeId {
        let out = &self.nodes[self.output_id];
        match out.kind {
            OpKind::Softmax => out.inputs[0],
            _ => self.output_id,
        }
    }

    pub fn input_sample_shape(&self) -> [usize; 3] {
        match self.nodes[self.input_id].kind {
            OpKind::Input { sample } => sample,
            _ => unreachable!("input node kind checked at construction"),
        }
    }

    /// Output shape of every node for a batch of `n`, without running data.
    pub fn infer_shapes(&self, n: usize) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let shape = infer_node(node, &shapes, n).map_err(|e| name_error(node, e))?;
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// `(name, shape, trainable)` for every parameter, in node order.
    pub fn param_specs(&self) -> Result<Vec<(String, Vec<usize>, bool)>> {
        let shapes = self.infer_shapes(1)?;
        let mut specs = Vec::new();
        for node in &self.nodes {
            let in_shape = node.inputs.first().map(|&i| shapes[i].as_slice());
            let per_param: Vec<Vec<usize>> = match (&node.kind, in_shape) {
                (OpKind::Conv2d(a), Some(s)) => {
                    vec![a.weight_shape(s[1]).to_vec(), vec![a.out_channels]]
                }
                (OpKind::Dense { units }, Some(s)) => vec![vec![s[1], *units], vec![*units]],
                (OpKind::BatchNorm { .. }, Some(s)) => vec![vec![s[1]]; 4],
                _ => Vec::new(),
            };
            for ((name, shape), suffix) in node
                .param_names
                .iter()
                .zip(per_param)
                .zip(node.kind.param_suffixes())
            {
                specs.push((name.clone(), shape, is_trainable_suffix(suffix)));
            }
        }
        Ok(specs)
    }

    /// Checks that every parameter the graph needs is in `params` with the
    /// expected shape.
    pub fn check_params<T: Scalar>(&self, params: &ParamStore<T>) -> Result<()> {
        for (name, shape, _) in self.param_specs()? {
            let t = params
                .get(&name)
                .ok_or_else(|| Error::State(format!("parameter {name:?} missing from store")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::State(format!(
                    "parameter {name:?} has shape {:?}, graph expects {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

fn name_error(node: &OpNode, e: Error) -> Error {
    match e {
        Error::Shape(m) => Error::Shape(format!("node {:?}: {m}", node.name)),
        other => other,
    }
}

fn infer_node(node: &OpNode, shapes: &[Vec<usize>], n: usize) -> Result<Vec<usize>> {
    let input = |k: usize| shapes[node.inputs[k]].as_slice();
    let four = |s: &[usize]| -> Result<[usize; 4]> {
        <[usize; 4]>::try_from(s).map_err(|_| shape_err!("expected rank-4 input, got {s:?}"))
    };
    Ok(match &node.kind {
        OpKind::Input { sample } => vec![n, sample[0], sample[1], sample[2]],
        OpKind::Conv2d(a) => {
            let [n, _, h, w] = four(input(0))?;
            let (oh, ow) = a.output_hw(h, w)?;
            vec![n, a.out_channels, oh, ow]
        }
        OpKind::Pool2d(a) => {
            let [n, c, h, w] = four(input(0))?;
            let (oh, ow) = a.output_hw(h, w)?;
            vec![n, c, oh, ow]
        }
        OpKind::Relu | OpKind::Dropout { .. } | OpKind::BatchNorm { .. } => input(0).to_vec(),
        OpKind::Flatten => {
            let s = input(0);
            vec![s[0], s[1..].iter().product()]
        }
        OpKind::Concat => {
            let mut width = 0;
            for k in 0..node.inputs.len() {
                match input(k) {
                    [b, d] if *b == n => width += d,
                    s => return Err(shape_err!("concat input {k} has shape {s:?}")),
                }
            }
            vec![n, width]
        }
        OpKind::Dense { units } => match input(0) {
            [b, _] => vec![*b, *units],
            s => return Err(shape_err!("dense expects a rank-2 input, got {s:?}")),
        },
        OpKind::Softmax => match input(0) {
            [b, k] if *k >= 2 => vec![*b, *k],
            s => return Err(shape_err!("softmax expects [n,k>=2], got {s:?}")),
        },
    })
}

/// Activations and per-call state captured by [`forward`].
#[derive(Debug, Clone)]
pub struct Tape<T: Scalar> {
    mode: Mode,
    values: Vec<Option<Tensor<T>>>,
    masks: Vec<Option<DropoutMask<T>>>,
    norm_stats: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Scalar> Tape<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Output of a node. In infer mode only the graph output is retained.
    pub fn value(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.values.get(id).and_then(Option::as_ref)
    }

    fn require(&self, id: NodeId) -> Result<&Tensor<T>> {
        self.value(id)
            .ok_or_else(|| Error::State(format!("tape lacks the value of node {id}")))
    }
}

fn norm_state<T: Scalar>(node: &OpNode, params: &ParamStore<T>) -> Result<NormState<T>> {
    let (epsilon, momentum) = match node.kind {
        OpKind::BatchNorm { epsilon, momentum } => (epsilon, momentum),
        _ => unreachable!("norm_state on a non-norm node"),
    };
    let p = &node.param_names;
    Ok(NormState {
        gamma: params.value(&p[0])?.clone(),
        beta: params.value(&p[1])?.clone(),
        moving_mean: params.value(&p[2])?.clone(),
        moving_var: params.value(&p[3])?.clone(),
        epsilon,
        momentum,
    })
}

/// Runs the graph on `x`. Train mode records everything backward needs;
/// infer mode uses moving statistics and identity dropout and frees each
/// intermediate once its last consumer has run.
pub fn forward<T: Scalar, R: Rng + ?Sized>(
    graph: &Graph,
    params: &ParamStore<T>,
    x: &Tensor<T>,
    mode: Mode,
    rng: &mut R,
    exec: Exec,
) -> Result<(Tensor<T>, Tape<T>)> {
    let sample = graph.input_sample_shape();
    let xs = x.dims4().map_err(|e| name_error(graph.node(graph.input_id), e))?;
    if [xs.c, xs.h, xs.w] != sample {
        return Err(shape_err!(
            "node {:?}: input {:?} does not match declared sample shape {sample:?}",
            graph.node(graph.input_id).name,
            x.shape()
        ));
    }
    let len = graph.nodes.len();
    let mut tape = Tape {
        mode,
        values: vec![None; len],
        masks: vec![None; len],
        norm_stats: vec![None; len],
    };
    for node in &graph.nodes {
        let out = eval_node(node, params, &mut tape, x, mode, rng, exec)
            .map_err(|e| name_error(node, e))?;
        if !out.all_finite() {
            return Err(Error::Numeric(format!("node {:?} produced a non-finite value", node.name)));
        }
        tape.values[node.id] = Some(out);
        if mode == Mode::Infer {
            for &i in &node.inputs {
                if graph.last_use[i] == node.id && i != graph.output_id {
                    tape.values[i] = None;
                }
            }
        }
    }
    let output = tape.require(graph.output_id)?.clone();
    Ok((output, tape))
}

fn eval_node<T: Scalar, R: Rng + ?Sized>(
    node: &OpNode,
    params: &ParamStore<T>,
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    mode: Mode,
    rng: &mut R,
    exec: Exec,
) -> Result<Tensor<T>> {
    let p = &node.param_names;
    if let OpKind::Input { .. } = node.kind {
        return Ok(x.clone());
    }
    let input = tape.require(node.inputs[0])?;
    Ok(match &node.kind {
        OpKind::Input { .. } => unreachable!(),
        OpKind::Conv2d(a) => {
            ops::conv2d_forward(input, params.value(&p[0])?, params.value(&p[1])?, a, exec)?
        }
        OpKind::Relu => ops::relu(input),
        OpKind::Pool2d(a) => ops::pool2d_forward(input, a, exec)?,
        OpKind::BatchNorm { .. } => {
            let state = norm_state(node, params)?;
            let out = ops::batchnorm_forward(input, &state, mode, exec)?;
            if let (Some(m), Some(v)) = (out.batch_mean, out.batch_var) {
                tape.norm_stats[node.id] = Some((m, v));
            }
            out.output
        }
        OpKind::Flatten => ops::flatten(input)?,
        OpKind::Dropout { rate } => {
            let (out, mask) = ops::dropout(input, *rate, mode, rng)?;
            tape.masks[node.id] = Some(mask);
            out
        }
        OpKind::Concat => {
            let parts: Vec<&Tensor<T>> = node
                .inputs
                .iter()
                .map(|&i| tape.require(i))
                .collect::<Result<_>>()?;
            ops::concat(&parts)?
        }
        OpKind::Dense { .. } => {
            ops::dense_forward(input, params.value(&p[0])?, params.value(&p[1])?, exec)?
        }
        OpKind::Softmax => ops::softmax(input)?,
    })
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn check_tape<T: Scalar>(graph: &Graph, tape: &Tape<T>) -> Result<()> {
    if tape.mode != Mode::Train {
        return Err(Error::State("backward needs a tape from a train-mode forward".into()));
    }
    if tape.values.len() != graph.nodes.len() {
        return Err(Error::State(format!(
            "tape has {} entries, graph has {} nodes",
            tape.values.len(),
            graph.nodes.len()
        )));
    }
    Ok(())
}

/// Gradients of every trainable parameter given `d loss / d output`.
pub fn backward<T: Scalar>(
    graph: &Graph,
    params: &ParamStore<T>,
    tape: &Tape<T>,
    grad_output: &Tensor<T>,
    exec: Exec,
) -> Result<GradMap<T>> {
    backward_from(graph, params, tape, graph.output_id, grad_output, exec)
}

/// Like [`backward`] but seeds the sweep at an arbitrary node (typically
/// the logits, with the loss gradient computed outside the graph).
pub fn backward_from<T: Scalar>(
    graph: &Graph,
    params: &ParamStore<T>,
    tape: &Tape<T>,
    seed: NodeId,
    grad: &Tensor<T>,
    exec: Exec,
) -> Result<GradMap<T>> {
    check_tape(graph, tape)?;
    let seed_value = tape.require(seed)?;
    if seed_value.shape() != grad.shape() {
        return Err(shape_err!(
            "seed gradient {:?} does not match node {:?} output {:?}",
            grad.shape(),
            graph.nodes[seed].name,
            seed_value.shape()
        ));
    }
    let mut grads: Vec<Option<Tensor<T>>> = vec![None; graph.nodes.len()];
    grads[seed] = Some(grad.clone());
    let mut out = params.zero_grads();

    for id in (0..=seed).rev() {
        let Some(g) = grads[id].take() else { continue };
        let node = &graph.nodes[id];
        let p = &node.param_names;
        let upstream = |k: usize| tape.require(node.inputs[k]);
        let mut step = || -> Result<Vec<(usize, Tensor<T>)>> {
            Ok(match &node.kind {
                OpKind::Input { .. } => Vec::new(),
                OpKind::Conv2d(_) => {
                    let r = ops::conv2d_backward(&g, upstream(0)?, params.value(&p[0])?, exec)?;
                    set_grad(&mut out, &p[0], r.weights)?;
                    set_grad(&mut out, &p[1], r.bias)?;
                    vec![(0, r.x)]
                }
                OpKind::Relu => vec![(0, ops::relu_backward(&g, upstream(0)?)?)],
                OpKind::Pool2d(a) => vec![(0, ops::pool2d_backward(&g, upstream(0)?, a, exec)?)],
                OpKind::BatchNorm { .. } => {
                    let state = norm_state(node, params)?;
                    let r = ops::batchnorm_backward(&g, upstream(0)?, &state, exec)?;
                    set_grad(&mut out, &p[0], r.gamma)?;
                    set_grad(&mut out, &p[1], r.beta)?;
                    vec![(0, r.x)]
                }
                OpKind::Flatten => vec![(0, g.reshape(upstream(0)?.shape().to_vec())?)],
                OpKind::Dropout { .. } => {
                    let mask = tape.masks[id]
                        .as_ref()
                        .ok_or_else(|| Error::State(format!("no dropout mask for {:?}", node.name)))?;
                    vec![(0, ops::dropout_backward(&g, mask)?)]
                }
                OpKind::Concat => {
                    let widths: Vec<usize> = (0..node.inputs.len())
                        .map(|k| upstream(k).and_then(|t| t.dims2().map(|d| d.1)))
                        .collect::<Result<_>>()?;
                    ops::concat_backward(&g, &widths)?.into_iter().enumerate().collect()
                }
                OpKind::Dense { .. } => {
                    let r = ops::dense_backward(&g, upstream(0)?, params.value(&p[0])?, exec)?;
                    set_grad(&mut out, &p[0], r.weights)?;
                    set_grad(&mut out, &p[1], r.bias)?;
                    vec![(0, r.x)]
                }
                OpKind::Softmax => vec![(0, ops::softmax_backward(&g, tape.require(id)?)?)],
            })
        };
        for (k, gi) in step().map_err(|e| name_error(node, e))? {
            accumulate(&mut grads[node.inputs[k]], gi)?;
        }
    }
    Ok(out)
}

fn set_grad<T: Scalar>(out: &mut GradMap<T>, name: &str, g: Tensor<T>) -> Result<()> {
    let slot = out
        .get_mut(name)
        .ok_or_else(|| Error::State(format!("{name:?} is not a trainable parameter")))?;
    slot.add_assign(&g)
}

/// Folds the batch statistics recorded in a train-mode tape into the moving
/// averages of every normalization layer.
pub fn update_running_stats<T: Scalar>(
    graph: &Graph,
    params: &mut ParamStore<T>,
    tape: &Tape<T>,
) -> Result<()> {
    check_tape(graph, tape)?;
    for node in &graph.nodes {
        let Some((mean, var)) = &tape.norm_stats[node.id] else { continue };
        let mut state = norm_state(node, params)?;
        state.update_moving(mean, var)?;
        *params.value_mut(&node.param_names[2])? = state.moving_mean;
        *params.value_mut(&node.param_names[3])? = state.moving_var;
    }
    Ok(())
}

impl fmt::Display for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for n in &self.nodes {
            writeln!(f, "{:>3} {:<24} {:<10} <- {:?}", n.id, n.name, n.kind.tag(), n.inputs)?;
        }
        Ok(())
    }
}

/// Convenience builder assigning ids in insertion order.
#[derive(Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<OpNode>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: OpKind, inputs: &[NodeId]) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(OpNode::new(id, name, kind, inputs.to_vec()));
        id
    }

    pub fn build(self, output: NodeId) -> Result<Graph> {
        Graph::new(self.nodes, output)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::PoolMode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn node(id: NodeId, name: &str, inputs: &[NodeId]) -> OpNode {
        let kind = if inputs.is_empty() {
            OpKind::Input { sample: [1, 2, 2] }
        } else {
            OpKind::Relu
        };
        OpNode::new(id, name, kind, inputs.to_vec())
    }

    fn names(nodes: &[OpNode]) -> Vec<&str> {
        nodes.iter().map(|n| n.name.as_str()).collect()
    }

    #[test]
    fn toposort_chain_and_stability() {
        let chain = vec![node(2, "c", &[1]), node(0, "a", &[]), node(1, "b", &[0])];
        assert_eq!(names(&toposort(chain).unwrap()), vec!["a", "b", "c"]);

        let branches = vec![
            node(0, "in", &[]),
            node(1, "b1", &[0]),
            node(2, "b2", &[0]),
            node(3, "b3", &[0]),
        ];
        assert_eq!(names(&toposort(branches).unwrap()), vec!["in", "b1", "b2", "b3"]);
    }

    #[test]
    fn toposort_cycles() {
        let selfloop = vec![node(0, "in", &[]), node(1, "x", &[1])];
        assert!(matches!(toposort(selfloop), Err(Error::Construction(_))));
        let cyc = vec![node(0, "in", &[]), node(1, "x", &[2]), node(2, "y", &[1])];
        assert!(matches!(toposort(cyc), Err(Error::Construction(_))));
    }

    #[test]
    fn single_flatten_graph() {
        let mut b = GraphBuilder::new();
        let i = b.add("in", OpKind::Input { sample: [2, 3, 3] }, &[]);
        let f = b.add("flat", OpKind::Flatten, &[i]);
        let g = b.build(f).unwrap();
        let x = Tensor::<f64>::from_vec(vec![2, 2, 3, 3], (0..36).map(f64::from).collect()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (y, _) = forward(&g, &ParamStore::new(), &x, Mode::Infer, &mut rng, Exec::Sequential).unwrap();
        assert_eq!(y, x.reshape(vec![2, 18]).unwrap());
    }

    #[test]
    fn input_shape_mismatch_names_node() {
        let mut b = GraphBuilder::new();
        let i = b.add("images", OpKind::Input { sample: [1, 4, 4] }, &[]);
        let r = b.add("act", OpKind::Relu, &[i]);
        let g = b.build(r).unwrap();
        let x = Tensor::<f64>::zeros(vec![1, 1, 3, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = forward(&g, &ParamStore::new(), &x, Mode::Infer, &mut rng, Exec::Sequential)
            .unwrap_err();
        assert!(err.to_string().contains("images"), "{err}");

        let mut b = GraphBuilder::new();
        let i = b.add("images", OpKind::Input { sample: [1, 2, 2] }, &[]);
        let p = b.add("bigpool", OpKind::Pool2d(PoolAttrs::square(3, PoolMode::Max)), &[i]);
        let g = b.build(p).unwrap();
        let err = g.infer_shapes(1).unwrap_err();
        assert!(err.to_string().contains("bigpool"), "{err}");
    }

    #[test]
    fn diamond_accumulates_fan_out() {
        // in -> flatten -> pre -> {relu a, relu b} -> concat -> head
        let mut b = GraphBuilder::new();
        let i = b.add("in", OpKind::Input { sample: [1, 1, 3] }, &[]);
        let f = b.add("flat", OpKind::Flatten, &[i]);
        let pre = b.add("pre", OpKind::Dense { units: 3 }, &[f]);
        let a = b.add("a", OpKind::Relu, &[pre]);
        let c = b.add("b", OpKind::Relu, &[pre]);
        let cat = b.add("cat", OpKind::Concat, &[a, c]);
        let d = b.add("head", OpKind::Dense { units: 1 }, &[cat]);
        let g = b.build(d).unwrap();

        let mut params = ParamStore::<f64>::new();
        params.insert("pre.weight", Tensor::eye(3).unwrap(), true).unwrap();
        params.insert("pre.bias", Tensor::zeros(vec![3]).unwrap(), true).unwrap();
        let w = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        params
            .insert("head.weight", Tensor::from_vec(vec![6, 1], w.clone()).unwrap(), true)
            .unwrap();
        params.insert("head.bias", Tensor::zeros(vec![1]).unwrap(), true).unwrap();
        let x = Tensor::from_vec(vec![1, 1, 1, 3], vec![0.5, 1.0, 2.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, tape) = forward(&g, &params, &x, Mode::Train, &mut rng, Exec::Sequential).unwrap();
        let seed = Tensor::from_vec(vec![1, 1], vec![1.0]).unwrap();
        let grads = backward(&g, &params, &tape, &seed, Exec::Sequential).unwrap();
        assert_eq!(grads["head.weight"].data(), &[0.5, 1.0, 2.0, 0.5, 1.0, 2.0]);
        // The fan-out node receives the sum of both branch gradients.
        let expect: Vec<f64> = (0..3).map(|k| w[k] + w[k + 3]).collect();
        assert_eq!(grads["pre.bias"].data(), expect.as_slice());
        assert_eq!(
            grads.keys().collect::<Vec<_>>(),
            vec!["pre.weight", "pre.bias", "head.weight", "head.bias"]
        );
    }

    #[test]
    fn zero_seed_gives_zero_grads_and_infer_tape_rejected() {
        let mut b = GraphBuilder::new();
        let i = b.add("in", OpKind::Input { sample: [1, 1, 2] }, &[]);
        let f = b.add("flat", OpKind::Flatten, &[i]);
        let d = b.add("fc", OpKind::Dense { units: 2 }, &[f]);
        let s = b.add("sm", OpKind::Softmax, &[d]);
        let g = b.build(s).unwrap();
        let mut params = ParamStore::<f64>::new();
        params.insert("fc.weight", Tensor::from_vec(vec![2, 2], vec![0.3, -0.2, 0.1, 0.4]).unwrap(), true).unwrap();
        params.insert("fc.bias", Tensor::zeros(vec![2]).unwrap(), true).unwrap();
        let x = Tensor::from_vec(vec![1, 1, 1, 2], vec![1.0, -1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (y, tape) = forward(&g, &params, &x, Mode::Train, &mut rng, Exec::Sequential).unwrap();
        let grads = backward(&g, &params, &tape, &y.zeros_like(), Exec::Sequential).unwrap();
        assert!(grads.values().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert_eq!(g.logits_id(), d);

        let (_, infer_tape) = forward(&g, &params, &x, Mode::Infer, &mut rng, Exec::Sequential).unwrap();
        assert!(matches!(
            backward(&g, &params, &infer_tape, &y, Exec::Sequential),
            Err(Error::State(_))
        ));
    }
}
