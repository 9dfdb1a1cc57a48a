use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Group, ParamSet};

/// Adam with bias correction over the parameters of one group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub group: Group,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    /// first and second moments per parameter; empty outside the group
    #[serde(skip)]
    pub m: Vec<Vec<f64>>,
    #[serde(skip)]
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, group: Group, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !lr.is_finite()
            || lr <= 0.0
            || !(0.0..1.0).contains(&beta1)
            || !(0.0..1.0).contains(&beta2)
            || !eps.is_finite()
            || eps <= 0.0
        {
            return Err(Error::Config(format!(
                "invalid Adam settings lr={lr} beta1={beta1} beta2={beta2} eps={eps}"
            )));
        }
        let zeros = |p: &crate::nn::Param| {
            if p.group == group {
                vec![0.0; p.value.len()]
            } else {
                Vec::new()
            }
        };
        Ok(Adam {
            group,
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: params.iter().map(|(_, p)| zeros(p)).collect(),
            v: params.iter().map(|(_, p)| zeros(p)).collect(),
        })
    }

    /// One update. Parameters without a gradient are left alone.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Vec<f64>>]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::shape("adam", &[params.len()], &[grads.len()]));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (id, grad) in params.ids().collect::<Vec<_>>().into_iter().zip(grads) {
            let Some(grad) = grad else { continue };
            let p = params.get_mut(id);
            if p.group != self.group {
                return Err(Error::Contract(format!(
                    "{} received a gradient outside its optimizer group",
                    p.name
                )));
            }
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            for (((w, g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Init;

    fn one_param(values: &[f64]) -> ParamSet {
        let mut ps = ParamSet::new();
        let id = ps.add("w", Group::Generator, &[values.len()], Init::Zeros);
        ps.get_mut(id).value.data_mut().copy_from_slice(values);
        ps.add("c", Group::Critic, &[1], Init::Zeros);
        ps
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut ps = one_param(&[0.5, -1.0]);
        let before = ps.clone();
        let mut opt = Adam::new(&ps, Group::Generator, 1e-3, 0.5, 0.999, 1e-8).unwrap();
        for _ in 0..5 {
            opt.step(&mut ps, &[Some(vec![0.0, 0.0]), None]).unwrap();
        }
        assert_eq!(ps, before);
    }

    #[test]
    fn first_step_closed_form() {
        let mut ps = one_param(&[1.0, 1.0, 1.0]);
        let lr = 0.01;
        let mut opt = Adam::new(&ps, Group::Generator, lr, 0.5, 0.999, 1e-8).unwrap();
        let g = [0.3, -2.0, 1e-9];
        opt.step(&mut ps, &[Some(g.to_vec()), None]).unwrap();
        // bias-corrected moments are g and g², so the step is lr·g/(|g| + eps)
        for (w, g) in ps.get(ps.find("w").unwrap()).value.data().iter().zip(g) {
            let expect = 1.0 - lr * g / (g.abs() + 1e-8);
            assert!((w - expect).abs() < 1e-15, "{w} {expect}");
        }
    }

    #[test]
    fn constant_gradient_steps_by_lr() {
        let mut ps = one_param(&[0.0]);
        let lr = 1e-3;
        let mut opt = Adam::new(&ps, Group::Generator, lr, 0.5, 0.999, 1e-8).unwrap();
        let mut prev = 0.0;
        for _ in 0..200 {
            opt.step(&mut ps, &[Some(vec![0.7]), None]).unwrap();
            let w = ps.get(ps.find("w").unwrap()).value.data()[0];
            assert!(((prev - w) / lr - 1.0).abs() < 1e-6);
            prev = w;
        }
    }

    #[test]
    fn rejects_foreign_gradients_and_bad_settings() {
        let mut ps = one_param(&[0.0]);
        let mut opt = Adam::new(&ps, Group::Generator, 1e-3, 0.5, 0.999, 1e-8).unwrap();
        assert!(opt.step(&mut ps, &[None, Some(vec![1.0])]).is_err());
        assert!(Adam::new(&ps, Group::Generator, 0.0, 0.5, 0.999, 1e-8).is_err());
        assert!(Adam::new(&ps, Group::Generator, 1e-3, 1.0, 0.999, 1e-8).is_err());
    }
}
