use crate::numerics::{Element, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// First and second moments per parameter tensor, and the number of
/// updates applied so far.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn zeros_like(params: &[Tensor<T>]) -> Self {
        AdamState {
            m: params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect(),
            v: params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect(),
            t: 0,
        }
    }
}

/// One bias-corrected AdamW update. Weight decay is decoupled and applies
/// to matrices only, so biases, norms and tokens are not shrunk. Any
/// non-finite gradient aborts before anything changes.
pub fn adam_step<T: Element>(
    params: &[Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    lr: f64,
    cfg: &AdamConfig,
    names: &[String],
) -> Result<Vec<Tensor<T>>> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Consistency(
            "parameter, gradient and moment counts differ".into(),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", p.shape(), g.shape()));
        }
        if !g.is_finite() {
            return Err(Error::Divergence {
                step: state.t + 1,
                component: format!(
                    "gradient of {}",
                    names.get(i).map_or("parameter", String::as_str)
                ),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let mut out = Vec::with_capacity(params.len());
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        let decay = if p.rank() >= 2 { cfg.weight_decay } else { 0.0 };
        let n = p.numel();
        let (mut pn, mut mn, mut vn) = (
            Vec::with_capacity(n),
            Vec::with_capacity(n),
            Vec::with_capacity(n),
        );
        for j in 0..n {
            let gj = g.data()[j].f64();
            let m = b1 * state.m[i].data()[j].f64() + (1.0 - b1) * gj;
            let v = b2 * state.v[i].data()[j].f64() + (1.0 - b2) * gj * gj;
            let x = p.data()[j].f64();
            let update = (m / c1) / ((v / c2).sqrt() + cfg.eps) + decay * x;
            pn.push(T::of(x - lr * update));
            mn.push(T::of(m));
            vn.push(T::of(v));
        }
        out.push(Tensor::new(p.shape().to_vec(), pn)?);
        state.m[i] = Tensor::new(p.shape().to_vec(), mn)?;
        state.v[i] = Tensor::new(p.shape().to_vec(), vn)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(wd: f64) -> AdamConfig {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let p = vec![Tensor::<f64>::from_f64(vec![2, 2], &[1.0, -2.0, 3.0, 0.5]).unwrap()];
        let g = vec![Tensor::zeros(vec![2, 2])];
        let mut s = AdamState::zeros_like(&p);
        let mut cur = p.clone();
        for _ in 0..5 {
            cur = adam_step(&cur, &g, &mut s, 0.1, &cfg(0.0), &[]).unwrap();
        }
        assert_eq!(cur, p);
    }

    #[test]
    fn quadratic_shrinks_monotonically() {
        let mut x = vec![Tensor::<f64>::from_f64(vec![1], &[1.0]).unwrap()];
        let mut s = AdamState::zeros_like(&x);
        let mut prev = 1.0f64;
        let no_momentum = AdamConfig {
            beta1: 0.0,
            ..cfg(0.0)
        };
        for _ in 0..50 {
            let g = vec![x[0].map(|v| 2.0 * v)];
            x = adam_step(&x, &g, &mut s, 0.1, &no_momentum, &[]).unwrap();
            let now = x[0].item().abs();
            assert!(now < prev, "{now} !< {prev}");
            prev = now;
        }
    }

    #[test]
    fn quadratic_converges_with_default_betas() {
        let mut x = vec![Tensor::<f64>::from_f64(vec![1], &[1.0]).unwrap()];
        let mut s = AdamState::zeros_like(&x);
        for _ in 0..200 {
            let g = vec![x[0].map(|v| 2.0 * v)];
            x = adam_step(&x, &g, &mut s, 0.1, &cfg(0.0), &[]).unwrap();
        }
        assert!(x[0].item().abs() < 0.05, "{}", x[0].item());
    }

    #[test]
    fn same_inputs_same_bytes() {
        let run = || {
            let mut x = vec![
                Tensor::<f32>::from_f64(vec![3, 2], &[0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap(),
            ];
            let mut s = AdamState::zeros_like(&x);
            for k in 0..10 {
                let g = vec![x[0].map(|v| v * (k as f32 + 1.0) - 0.1)];
                x = adam_step(&x, &g, &mut s, 0.01, &cfg(0.05), &[]).unwrap();
            }
            x[0].clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_names_step_and_tensor() {
        let p = vec![Tensor::<f64>::zeros(vec![2])];
        let g = vec![Tensor::from_f64(vec![2], &[0.0, f64::NAN]).unwrap()];
        let mut s = AdamState::zeros_like(&p);
        let e = adam_step(&p, &g, &mut s, 0.1, &cfg(0.0), &["enc.w".into()]).unwrap_err();
        match e {
            Error::Divergence { step, component } => {
                assert_eq!(step, 1);
                assert!(component.contains("enc.w"));
            }
            other => panic!("{other}"),
        }
        assert_eq!(s.t, 0);
    }

    #[test]
    fn decay_skips_vectors() {
        let p = vec![
            Tensor::<f64>::ones(vec![2, 2]),
            Tensor::<f64>::ones(vec![2]),
        ];
        let g: Vec<_> = p
            .iter()
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        let mut s = AdamState::zeros_like(&p);
        let out = adam_step(&p, &g, &mut s, 0.1, &cfg(0.5), &[]).unwrap();
        assert!(out[0].data().iter().all(|&v| (v - 0.95).abs() < 1e-15));
        assert_eq!(out[1], p[1]);
    }
}
