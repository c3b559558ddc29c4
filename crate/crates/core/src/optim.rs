//! Losses and the Adam update.

use crate::error::{Error, Result};
use crate::ops::softmax;
use crate::params::{GradMap, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Smallest probability fed to `ln`.
pub const PROB_FLOOR: f64 = 1e-12;

fn sigmoid_scalar(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Two-class logistic cost of one sample given the linear score `theta . x`.
///
/// `y = 1`: `-ln sigma(s)`. `y = 0`: `-ln sigma(1 - s)`, the form as printed
/// in the source derivation; the usual `-ln(1 - sigma(s))` differs. The
/// training path does not use this function.
pub fn binary_logistic_cost(score: f64, y: u8) -> f64 {
    let p = match y {
        0 => sigmoid_scalar(1.0 - score),
        _ => sigmoid_scalar(score),
    };
    -p.max(PROB_FLOOR).ln()
}

/// Mean of [`binary_logistic_cost`] over samples.
pub fn mean_logistic_cost(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Data(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| binary_logistic_cost(s, y))
        .sum();
    Ok(total / scores.len() as f64)
}

/// Mean cross-entropy and its gradient with respect to the logits.
#[derive(Debug, Clone)]
pub struct LossValue<T: Scalar> {
    pub mean_loss: f64,
    pub grad_logits: Tensor<T>,
    pub probabilities: Tensor<T>,
}

/// `mean(-ln p[true])` with `p = softmax(logits)`; gradient `(p - onehot) / n`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<LossValue<T>> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::Data(format!("{n} logit rows but {} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
    }
    let p = softmax(logits)?;
    let mut loss = 0.0;
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut grad = p.clone();
    for (r, (&label, row)) in labels.iter().zip(grad.data_mut().chunks_mut(k)).enumerate() {
        let pt = p.data()[r * k + label].to_f64().max(PROB_FLOOR);
        loss -= pt.ln();
        row[label] -= T::ONE;
        for v in row.iter_mut() {
            *v *= inv_n;
        }
    }
    Ok(LossValue {
        mean_loss: loss / n as f64,
        grad_logits: grad,
        probabilities: p,
    })
}

/// Adam hyper-parameters and the global step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub t: u64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
            t: 0,
        }
    }
}

impl AdamConfig {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Param(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Param("Adam betas must be in [0,1)".into()));
        }
        if self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return Err(Error::Param("Adam epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update over every trainable entry.
///
/// `grads` must name exactly the trainable parameters.
pub fn adam_step<T: Scalar>(params: &mut ParamStore<T>, grads: &GradMap<T>, cfg: &mut AdamConfig) -> Result<()> {
    cfg.validate()?;
    let trainable: Vec<&str> = params.trainable_names().collect();
    if trainable.len() != grads.len() || trainable.iter().any(|n| !grads.contains_key(*n)) {
        let missing: Vec<&str> = trainable.iter().copied().filter(|n| !grads.contains_key(*n)).collect();
        let extra: Vec<&str> = grads
            .keys()
            .map(String::as_str)
            .filter(|k| !trainable.contains(k))
            .collect();
        return Err(Error::State(format!(
            "gradient names disagree with trainable parameters (missing {missing:?}, extra {extra:?})"
        )));
    }
    for (name, g) in grads {
        let value = params.get(name).expect("checked above");
        if value.shape() != g.shape() {
            return Err(Error::State(format!(
                "gradient for {name:?} has shape {:?}, parameter has {:?}",
                g.shape(),
                value.shape()
            )));
        }
    }

    cfg.t += 1;
    let t = cfg.t as i32;
    let b1 = T::from_f64(cfg.beta1);
    let b2 = T::from_f64(cfg.beta2);
    let one_b1 = T::from_f64(1.0 - cfg.beta1);
    let one_b2 = T::from_f64(1.0 - cfg.beta2);
    let corr1 = T::from_f64(1.0 - cfg.beta1.powi(t));
    let corr2 = T::from_f64(1.0 - cfg.beta2.powi(t));
    let lr = T::from_f64(cfg.learning_rate);
    let eps = T::from_f64(cfg.epsilon);

    for (name, entry) in params.iter_mut() {
        if !entry.trainable {
            continue;
        }
        let g = &grads[name];
        let slots = entry
            .slots
            .as_mut()
            .ok_or_else(|| Error::State(format!("trainable {name:?} lacks optimizer slots")))?;
        let (m, v) = (slots.m.data_mut(), slots.v.data_mut());
        for (((theta, &gi), mi), vi) in entry
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = b1 * *mi + one_b1 * gi;
            *vi = b2 * *vi + one_b2 * gi * gi;
            let m_hat = *mi / corr1;
            let v_hat = *vi / corr2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_store(theta: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("theta", Tensor::from_vec(vec![1], vec![theta]).unwrap(), true).unwrap();
        s
    }

    fn grad(g: f64) -> GradMap<f64> {
        let mut m = GradMap::new();
        m.insert("theta".to_string(), Tensor::from_vec(vec![1], vec![g]).unwrap());
        m
    }

    #[test]
    fn logistic_cost_values() {
        assert!((binary_logistic_cost(0.0, 1) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(binary_logistic_cost(50.0, 1) < 1e-15);
        // printed y = 0 branch: -ln sigma(1 - s)
        let s = 0.3;
        let expect = -(1.0 / (1.0 + (s - 1.0).exp())).ln();
        assert!((binary_logistic_cost(s, 0) - expect).abs() < 1e-15);
        assert!(binary_logistic_cost(-1e6, 1).is_finite());
    }

    #[test]
    fn mean_logistic_cost_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scores: Vec<f64> = (0..17).map(|_| rng.random_range(-4.0..4.0)).collect();
        let labels: Vec<u8> = (0..17).map(|_| rng.random_range(0..2)).collect();
        let mut total = 0.0;
        for i in 0..17 {
            let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
            total += if labels[i] == 1 {
                -sig(scores[i]).ln()
            } else {
                -sig(1.0 - scores[i]).ln()
            };
        }
        let got = mean_logistic_cost(&scores, &labels).unwrap();
        assert!((got - total / 17.0).abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = Tensor::<f64>::zeros(vec![4, 3]).unwrap();
        let l = softmax_cross_entropy(&uniform, &[0, 1, 2, 0]).unwrap();
        assert!((l.mean_loss - 3f64.ln()).abs() < 1e-15);
        assert!((l.mean_loss - 1.098_612_288_668_11).abs() < 1e-12);

        let confident = Tensor::<f64>::from_vec(vec![2, 3], vec![800.0, 0.0, 0.0, 0.0, 0.0, 800.0]).unwrap();
        let l = softmax_cross_entropy(&confident, &[0, 2]).unwrap();
        assert_eq!(l.mean_loss, 0.0);

        assert!(matches!(softmax_cross_entropy(&uniform, &[0, 1, 3, 0]), Err(Error::Data(_))));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let z: Vec<f64> = (0..15).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels = [0, 2, 1, 1, 0];
        let logits = Tensor::<f64>::from_vec(vec![5, 3], z.clone()).unwrap();
        let analytic = softmax_cross_entropy(&logits, &labels).unwrap().grad_logits;
        let h = 1e-5;
        for i in 0..15 {
            let mut zp = z.clone();
            zp[i] += h;
            let mut zm = z.clone();
            zm[i] -= h;
            let lp = softmax_cross_entropy(&Tensor::from_vec(vec![5, 3], zp).unwrap(), &labels).unwrap();
            let lm = softmax_cross_entropy(&Tensor::from_vec(vec![5, 3], zm).unwrap(), &labels).unwrap();
            let numeric = (lp.mean_loss - lm.mean_loss) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            assert!(rel <= 1e-6, "coord {i}: {a} vs {numeric}");
        }
        for row in analytic.data().chunks(3) {
            assert!(row.iter().sum::<f64>().abs() <= 1e-6);
        }
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut s = scalar_store(0.25);
        let mut cfg = AdamConfig::default();
        adam_step(&mut s, &grad(0.0), &mut cfg).unwrap();
        assert_eq!(s.get("theta").unwrap().data(), &[0.25]);
        assert_eq!(cfg.t, 1);
    }

    #[test]
    fn adam_first_step_hand_trace() {
        let mut s = scalar_store(0.0);
        let mut cfg = AdamConfig::default();
        adam_step(&mut s, &grad(1.0), &mut cfg).unwrap();
        // m = 0.1, v = 0.001, m_hat = 1, v_hat = 1
        let expect = -0.001 * 1.0 / (1.0 + 1e-7);
        assert!((s.get("theta").unwrap().data()[0] - expect).abs() < 1e-15);
        assert!((expect + 0.000_999_999_900_000_01).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_mismatched_names() {
        let mut s = scalar_store(0.0);
        let mut cfg = AdamConfig::default();
        let mut g = grad(1.0);
        g.insert("other".into(), Tensor::zeros(vec![1]).unwrap());
        assert!(matches!(adam_step(&mut s, &g, &mut cfg), Err(Error::State(_))));
        assert!(matches!(adam_step(&mut s, &GradMap::new(), &mut cfg), Err(Error::State(_))));
        assert_eq!(cfg.t, 0);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // f(theta) = (theta - 0.5)^2
        let mut s = scalar_store(-1.0);
        let mut cfg = AdamConfig::default();
        let target = 0.5;
        let mut reached = None;
        for step in 1..=5000 {
            let theta = s.get("theta").unwrap().data()[0];
            adam_step(&mut s, &grad(2.0 * (theta - target)), &mut cfg).unwrap();
            if (s.get("theta").unwrap().data()[0] - target).abs() < 1e-3 {
                reached = Some(step);
                break;
            }
        }
        assert!(reached.is_some());
    }
}
