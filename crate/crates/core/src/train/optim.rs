use crate::vit::{ParamEntry, ParameterStore, QUERY_TOKENS};
use serde::{Deserialize, Serialize};

/// AdamW hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Weight decay applies to trainable matrices except the query tokens.
pub fn decays(entry: &ParamEntry) -> bool {
    entry.trainable && entry.tensor.shape.len() >= 2 && entry.name != QUERY_TOKENS
}

/// Decoupled-decay Adam with moment buffers laid out like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: ParameterStore,
    pub v: ParameterStore,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParameterStore) -> Self {
        Self {
            config,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One update with learning rate `lr`. Non-trainable entries are untouched.
    pub fn step(&mut self, params: &mut ParameterStore, grads: &ParameterStore, lr: f64) {
        assert!(params.same_layout(grads) && params.same_layout(&self.m));
        self.t += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2_sqrt = (1.0 - beta2.powi(self.t as i32)).sqrt();
        let step_size = lr / bc1;
        let entries = params.entries_mut().iter_mut();
        let moments = self.m.entries_mut().iter_mut().zip(self.v.entries_mut().iter_mut());
        for ((p, g), (m, v)) in entries.zip(grads.entries()).zip(moments) {
            if !p.trainable {
                continue;
            }
            let shrink = if decays(p) { 1.0 - lr * weight_decay } else { 1.0 };
            let pd = &mut p.tensor.data;
            let (md, vd) = (&mut m.tensor.data, &mut v.tensor.data);
            for i in 0..pd.len() {
                let gi = g.tensor.data[i];
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let denom = vd[i].sqrt() / bc2_sqrt + eps;
                pd[i] = pd[i] * shrink - step_size * md[i] / denom;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::Tensor;

    fn store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("w", Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.0, -4.0]), true);
        s.insert("b", Tensor::from_vec(&[2], vec![0.5, -0.5]), true);
        s.insert(QUERY_TOKENS, Tensor::from_vec(&[1, 2], vec![2.0, 2.0]), true);
        s.insert("fixed", Tensor::from_vec(&[1, 2], vec![7.0, 7.0]), false);
        s
    }

    #[test]
    fn zero_gradient_only_decays_matrices() {
        let mut p = store();
        let g = p.zeros_like();
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        let lr = 0.1;
        opt.step(&mut p, &g, lr);
        let f = 1.0 - lr * 0.05;
        assert_eq!(p.entries()[0].tensor.data, vec![f, -2.0 * f, 3.0 * f, -4.0 * f]);
        assert_eq!(p.entries()[1].tensor.data, vec![0.5, -0.5]);
        assert_eq!(p.entries()[2].tensor.data, vec![2.0, 2.0]);
        assert_eq!(p.entries()[3].tensor.data, vec![7.0, 7.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut p = store();
        let mut g = p.zeros_like();
        g.entries_mut()[1].tensor.data = vec![3.0, -0.01];
        let mut opt = AdamW::new(AdamWConfig::default(), &p);
        opt.step(&mut p, &g, 1e-3);
        let b = &p.entries()[1].tensor.data;
        assert!((b[0] - (0.5 - 1e-3)).abs() < 1e-9);
        assert!((b[1] - (-0.5 + 1e-3)).abs() < 1e-9);
    }

    #[test]
    fn matches_scalar_reference() {
        let cfg = AdamWConfig::default();
        let (mut x, mut m, mut v) = (1.5f64, 0.0, 0.0);
        let mut p = ParameterStore::new();
        p.insert("w", Tensor::from_vec(&[1, 1], vec![x]), true);
        let mut opt = AdamW::new(cfg, &p);
        for t in 1..=20 {
            let grad = 2.0 * x - 1.0;
            let lr = 0.01 / t as f64;
            x *= 1.0 - lr * cfg.weight_decay;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            x -= lr * mh / (vh.sqrt() + cfg.eps);

            let mut g = p.zeros_like();
            g.entries_mut()[0].tensor.data[0] = 2.0 * p.entries()[0].tensor.data[0] - 1.0;
            opt.step(&mut p, &g, lr);
            assert!((p.entries()[0].tensor.data[0] - x).abs() < 1e-12);
        }
    }
}
