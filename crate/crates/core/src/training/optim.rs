use crate::autodiff::Matrix;
use crate::params::{ParamId, ParamStore};

/// Decoupled-weight-decay Adam with one learning-rate scale per parameter.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    m: Vec<Option<Matrix>>,
    v: Vec<Option<Matrix>>,
}

/// Parameters exempt from weight decay: biases, norm affines, embeddings and tokens.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias")
        || name.ends_with(".gamma")
        || name.ends_with(".beta")
        || name.contains(".pos.")
        || name.ends_with("_token"))
}

impl AdamW {
    pub fn new(betas: (f64, f64), weight_decay: f64) -> Self {
        Self {
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// One update. `grads[k]` belongs to `ids[k]`; `None` gradients leave
    /// the parameter and its moments untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        ids: &[ParamId],
        grads: &[Option<Matrix>],
        lr: impl Fn(ParamId) -> f64,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (&id, g) in ids.iter().zip(grads) {
            let Some(g) = g else { continue };
            let i = id.index();
            if self.m.len() <= i {
                self.m.resize(i + 1, None);
                self.v.resize(i + 1, None);
            }
            let m = self.m[i].get_or_insert_with(|| Matrix::zeros(g.dim()));
            m.zip_mut_with(g, |m, &g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            let v = self.v[i].get_or_insert_with(|| Matrix::zeros(g.dim()));
            v.zip_mut_with(g, |v, &g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let rate = lr(id);
            let wd = if decays(store.name(id)) {
                self.weight_decay
            } else {
                0.0
            };
            let (m, v) = (
                self.m[i].as_ref().expect("set"),
                self.v[i].as_ref().expect("set"),
            );
            let eps = self.eps;
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(m).and(v).for_each(|p, &m, &v| {
                let update = (m / bc1) / ((v / bc2).sqrt() + eps);
                *p -= rate * (update + wd * *p);
            });
        }
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Matrix>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= k);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut store = ParamStore::new();
        let w = store.add("w.weight", Matrix::from_elem((1, 2), 1.0));
        let b = store.add("w.bias", Matrix::from_elem((1, 2), 1.0));
        let mut opt = AdamW::new((0.9, 0.999), 0.1);
        let g = Some(Matrix::from_shape_vec((1, 2), vec![2.0, -3.0]).unwrap());
        opt.step(&mut store, &[w, b], &[g.clone(), g], |_| 0.01);
        let wv = store.get(w);
        assert!((wv[[0, 0]] - (1.0 - 0.01 * (1.0 + 0.1))).abs() < 1e-6);
        assert!((wv[[0, 1]] - (1.0 + 0.01 * (1.0 - 0.1))).abs() < 1e-6);
        let bv = store.get(b);
        assert!((bv[[0, 0]] - 0.99).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut grads = vec![
            Some(Matrix::from_elem((1, 1), 3.0)),
            None,
            Some(Matrix::from_elem((1, 1), 4.0)),
        ];
        assert_eq!(clip_grad_norm(&mut grads, 1.0), 5.0);
        let after = clip_grad_norm(&mut grads, 10.0);
        assert!((after - 1.0).abs() < 1e-12);
    }

    #[test]
    fn decay_exemptions() {
        assert!(decays("encoder.blocks.0.attn.qkv.weight"));
        assert!(!decays("encoder.norm.gamma"));
        assert!(!decays("encoder.pos.temporal"));
        assert!(!decays("decoder.mask_token"));
        assert!(!decays("head.fc.bias"));
    }
}
