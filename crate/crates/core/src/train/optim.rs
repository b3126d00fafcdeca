use super::TrainConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// First and second moment buffers, one pair per parameter block.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl OptimizerState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let first: Vec<Tensor> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape()))
            .collect();
        OptimizerState {
            second: first.clone(),
            first,
            step: 0,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }
}

/// One AdamW update: `p ← p·(1 − lr·wd)`, then the bias-corrected Adam step
/// `p ← p − lr·m̂/(√v̂ + eps)`.
///
/// Gradients are checked for non-finite values before anything is modified.
pub fn adamw_step(
    params: &mut [(String, Tensor)],
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::dim(
            "adamw_step",
            format!(
                "{} parameter blocks, {} gradients, {} moment buffers",
                params.len(),
                grads.len(),
                state.first.len()
            ),
        ));
    }
    if !(lr >= 0.0) {
        return Err(Error::Parameter(format!(
            "learning rate must be >= 0, got {lr}"
        )));
    }
    for ((name, p), g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::dim(
                "adamw_step",
                format!(
                    "`{name}` is {:?} but its gradient is {:?}",
                    p.shape(),
                    g.shape()
                ),
            ));
        }
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;

    for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (((w, &gj), mj), vj) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *w *= decay;
            *mj = b1 * *mj + (1.0 - b1) * gj;
            *vj = b2 * *vj + (1.0 - b2) * gj * gj;
            let m_hat = *mj / bc1;
            let v_hat = *vj / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Linear warmup from `base_lr / warmup_steps` to `base_lr`, then constant.
pub fn lr_schedule(step: usize, steps_per_epoch: usize, cfg: &TrainConfig) -> f64 {
    let warmup = cfg.warmup_epochs * steps_per_epoch;
    if warmup == 0 || step >= warmup {
        cfg.base_lr
    } else {
        cfg.base_lr * (step + 1) as f64 / warmup as f64
    }
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn cfg(lr: f64, wd: f64) -> TrainConfig {
        TrainConfig {
            base_lr: lr,
            weight_decay: wd,
            ..TrainConfig::default()
        }
    }

    fn block(values: Vec<f64>) -> Vec<(String, Tensor)> {
        let n = values.len();
        vec![("w".into(), Tensor::new(vec![n], values).unwrap())]
    }

    #[test]
    fn zero_gradient_only_decays() {
        let mut params = block(vec![1.0, -2.0, 0.5]);
        let mut state = OptimizerState::new(params.iter().map(|(_, t)| t));
        let c = cfg(0.01, 0.1);
        adamw_step(&mut params, &[Tensor::zeros(&[3])], &mut state, 0.01, &c).unwrap();
        let expect = [1.0 * 0.999, -2.0 * 0.999, 0.5 * 0.999];
        assert_eq!(params[0].1.data(), &expect);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the update is lr·g/(|g| + eps) ≈ lr.
        let mut params = block(vec![0.0]);
        let mut state = OptimizerState::new(params.iter().map(|(_, t)| t));
        let c = cfg(0.001, 0.0);
        let g = Tensor::new(vec![1], vec![2.0]).unwrap();
        adamw_step(&mut params, &[g], &mut state, 0.001, &c).unwrap();
        let expect = -0.001 * 2.0 / (2.0 + 1e-8);
        assert!((params[0].1.data()[0] - expect).abs() < 1e-15);
        assert!((params[0].1.data()[0] + 0.001).abs() < 1e-6);
        assert_eq!(state.step(), 1);
    }

    #[test]
    fn descends_a_quadratic_bowl() {
        let mut params = block(vec![0.8, -0.3, 0.5]);
        let mut state = OptimizerState::new(params.iter().map(|(_, t)| t));
        let c = cfg(0.05, 0.0);
        let loss = |p: &Tensor| p.data().iter().map(|v| v * v).sum::<f64>();
        let start = loss(&params[0].1);
        let g0 = params[0].1.map(|v| 2.0 * v);
        for _ in 0..2 {
            adamw_step(&mut params, std::slice::from_ref(&g0), &mut state, 0.05, &c).unwrap();
        }
        assert!(loss(&params[0].1) < start);
    }

    /// Adam written out independently, no weight decay.
    struct PlainAdam {
        m: Vec<f64>,
        v: Vec<f64>,
        t: i32,
    }

    impl PlainAdam {
        fn step(&mut self, p: &mut [f64], g: &[f64], lr: f64) {
            self.t += 1;
            for i in 0..p.len() {
                self.m[i] = 0.9 * self.m[i] + 0.1 * g[i];
                self.v[i] = 0.999 * self.v[i] + 0.001 * g[i] * g[i];
                let mh = self.m[i] / (1.0 - 0.9f64.powi(self.t));
                let vh = self.v[i] / (1.0 - 0.999f64.powi(self.t));
                p[i] -= lr * mh / (vh.sqrt() + 1e-8);
            }
        }
    }

    #[test]
    fn zero_decay_equals_plain_adam() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let init: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut params = block(init.clone());
        let mut state = OptimizerState::new(params.iter().map(|(_, t)| t));
        let mut reference = PlainAdam {
            m: vec![0.0; 6],
            v: vec![0.0; 6],
            t: 0,
        };
        let mut plain = init;
        let c = cfg(0.01, 0.0);
        for _ in 0..25 {
            let g: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
            adamw_step(
                &mut params,
                &[Tensor::new(vec![6], g.clone()).unwrap()],
                &mut state,
                0.01,
                &c,
            )
            .unwrap();
            reference.step(&mut plain, &g, 0.01);
            for (a, b) in params[0].1.data().iter().zip(&plain) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nan_gradient_names_block_and_leaves_params() {
        let mut params = vec![
            ("ok".to_string(), Tensor::zeros(&[2])),
            ("bad".to_string(), Tensor::zeros(&[2])),
        ];
        let before = params.clone();
        let mut state = OptimizerState::new(params.iter().map(|(_, t)| t));
        let grads = [
            Tensor::full(&[2], 1.0),
            Tensor::new(vec![2], vec![0.0, f64::NAN]).unwrap(),
        ];
        let err = adamw_step(&mut params, &grads, &mut state, 0.1, &cfg(0.1, 0.1)).unwrap_err();
        assert!(matches!(&err, Error::NonFiniteGradient(n) if n == "bad"));
        assert_eq!(params, before);
        assert_eq!(state.step(), 0);
    }

    #[test]
    fn warmup_schedule() {
        let c = TrainConfig {
            base_lr: 0.001,
            warmup_epochs: 10,
            ..TrainConfig::default()
        };
        assert!((lr_schedule(0, 4, &c) - 0.001 / 40.0).abs() < 1e-18);
        assert_eq!(lr_schedule(40, 4, &c), 0.001);
        assert_eq!(lr_schedule(1000, 4, &c), 0.001);
        let mut prev = 0.0;
        for s in 0..40 {
            let lr = lr_schedule(s, 4, &c);
            assert!(lr > prev && lr <= 0.001);
            prev = lr;
        }
        let flat = TrainConfig {
            warmup_epochs: 0,
            ..c
        };
        assert!((0..100).all(|s| lr_schedule(s, 4, &flat) == 0.001));
    }

    #[test]
    fn clipping_caps_joint_norm() {
        let mut g = vec![Tensor::full(&[2], 3.0), Tensor::full(&[1], 4.0)];
        let norm = clip_grad_norm(&mut g, 1.0);
        assert!((norm - (9.0f64 * 2.0 + 16.0).sqrt()).abs() < 1e-12);
        let after: f64 = g
            .iter()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }
}
