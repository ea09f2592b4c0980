//! Adam over a [`ParamSet`], skipping frozen groups.

use crate::autodiff::Graph;
use crate::model::{Bound, ParamSet};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros = || {
            params
                .params()
                .iter()
                .map(|p| {
                    let mut z = p.value.clone();
                    z.fill(0.0);
                    z
                })
                .collect::<Vec<_>>()
        };
        Self {
            lr,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update of every unfrozen tensor from the gradients accumulated
    /// on its leaf in `g`.
    pub fn step(&mut self, params: &mut ParamSet, g: &Graph, bound: &Bound) {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        let frozen: Vec<bool> = params.params().iter().map(|p| params.is_frozen(p.group)).collect();
        for (i, p) in params.params_mut().iter_mut().enumerate() {
            if frozen[i] {
                continue;
            }
            let grad = g.grad(bound.ids()[i]);
            let grad = grad.data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((w, &gr), m), v) in p.value.data_mut().iter_mut().zip(grad).zip(m).zip(v) {
                *m = BETA1 * *m + (1.0 - BETA1) * gr;
                *v = BETA2 * *v + (1.0 - BETA2) * gr * gr;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + EPSILON);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Group, ModelDims};
    use crate::rng::Rng;

    fn small() -> ParamSet {
        let dims = ModelDims {
            vocab: 10,
            d_w: 3,
            d_s: 3,
            attn_hidden: 2,
            disc_hidden: 2,
            cls_hidden: 2,
        };
        ParamSet::init(dims, &mut Rng::new(0)).unwrap()
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = small();
        let before = p.clone();
        let mut opt = AdamState::new(&p, 1e-3);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        opt.step(&mut p, &g, &b);
        assert_eq!(p, before);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = small();
        let before = p.get("cls_b2").unwrap().clone();
        let mut opt = AdamState::new(&p, 0.01);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let idx = p.params().iter().position(|q| q.name == "cls_b2").unwrap();
        let x = b.ids()[idx];
        let s = g.sum(x);
        g.backward(s).unwrap();
        opt.step(&mut p, &g, &b);
        for (a, b) in p.get("cls_b2").unwrap().data().iter().zip(before.data()) {
            // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
            assert!((b - a - 0.01 / (1.0 + EPSILON)).abs() < 1e-15);
        }
    }

    #[test]
    fn frozen_groups_untouched() {
        let mut p = small();
        p.set_frozen(&Group::MAIN, true);
        let before = p.groups_hash(&Group::MAIN);
        let mut opt = AdamState::new(&p, 0.1);
        let mut g = Graph::new();
        let b = p.bind(&mut g);
        let all: Vec<_> = b.ids().to_vec();
        let parts: Vec<_> = all.iter().map(|&id| g.sum(id)).collect();
        let c = g.concat(&parts).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        opt.step(&mut p, &g, &b);
        assert_eq!(p.groups_hash(&Group::MAIN), before);
        assert_ne!(p.groups_hash(&Group::DISCRIMINATORS), small().groups_hash(&Group::DISCRIMINATORS));
    }
}
