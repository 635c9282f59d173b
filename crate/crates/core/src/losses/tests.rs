use super::*;
use crate::numerics::{gradient_check, Streams, Tape, Tensor, Var};
use crate::vit::MaskSpec;
use crate::Error;
use rand::Rng;

fn rand_rows(seed: u64, n: usize, d: usize) -> Vec<Vec<f64>> {
    let mut r = Streams::new(seed).stream("rows", &[]);
    (0..n)
        .map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect()
}

fn tensor(rows: &[Vec<f64>]) -> Tensor<f64> {
    let d = rows[0].len();
    Tensor::new(vec![rows.len(), d], rows.concat()).unwrap()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

fn naive_info_nce(anchor: &[f64], cands: &[&[f64]], pos: usize, tau: f64) -> f64 {
    let num = (cos(anchor, cands[pos]) / tau).exp();
    let den: f64 = cands.iter().map(|c| (cos(anchor, c) / tau).exp()).sum();
    -(num / den).ln()
}

fn naive_cc(zl: &[Vec<f64>], zh: &[Vec<f64>], tau: f64, set: CandidateSet) -> f64 {
    let n = zl.len();
    let all: Vec<&[f64]> = zl.iter().chain(zh).map(Vec::as_slice).collect();
    let mut total = 0.0;
    for anchor in 0..2 * n {
        let positive = (anchor + n) % (2 * n);
        let mut cands = Vec::new();
        let mut pos_idx = 0;
        for c in 0..2 * n {
            let keep = match set {
                CandidateSet::AllButAnchor => c != anchor,
                CandidateSet::IncludeAnchor => true,
                CandidateSet::OtherScale => (c < n) != (anchor < n),
            };
            if keep {
                if c == positive {
                    pos_idx = cands.len();
                }
                cands.push(all[c]);
            }
        }
        total += naive_info_nce(all[anchor], &cands, pos_idx, tau);
    }
    total / (2 * n) as f64
}

fn eval(f: impl FnOnce(&Tape<f64>) -> crate::Result<Var>) -> crate::Result<f64> {
    let t = Tape::new();
    let v = f(&t)?;
    Ok(t.value(v).item())
}

#[test]
fn single_candidate_gives_zero() {
    let a = tensor(&[vec![0.3, -0.2, 0.9]]);
    let l = eval(|t| {
        let a = t.constant(a.clone());
        info_nce(t, a, 0, a, 0, 0.07)
    })
    .unwrap();
    assert_eq!(l, 0.0);
}

#[test]
fn orthogonal_negatives_closed_form() {
    let anchor = tensor(&[vec![1.0, 0.0, 0.0]]);
    let cands = tensor(&[
        vec![1.0, 0.0, 0.0],
        vec![0.0, 1.0, 0.0],
        vec![0.0, 0.0, 2.0],
    ]);
    let l = eval(|t| {
        let a = t.constant(anchor.clone());
        let c = t.constant(cands.clone());
        info_nce(t, a, 0, c, 0, 1.0)
    })
    .unwrap();
    let want = (1.0 + 2.0 / std::f64::consts::E).ln();
    assert!((l - want).abs() < 1e-9, "{l} vs {want}");
    assert!((l - 0.551444).abs() < 1e-6);
}

#[test]
fn candidate_scaling_is_invisible() {
    let rows = rand_rows(3, 5, 4);
    let mut scaled = rows.clone();
    for (i, r) in scaled.iter_mut().enumerate() {
        r.iter_mut().for_each(|v| *v *= 0.5 + i as f64);
    }
    let run = |c: &[Vec<f64>]| {
        eval(|t| {
            let a = t.constant(tensor(&rows));
            let c = t.constant(tensor(c));
            info_nce(t, a, 2, c, 1, 0.2)
        })
        .unwrap()
    };
    assert!((run(&rows) - run(&scaled)).abs() < 1e-12);
}

#[test]
fn bad_temperature_and_zero_rows() {
    let a = tensor(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let r = eval(|t| {
        let a = t.constant(a.clone());
        info_nce(t, a, 0, a, 1, 0.0)
    });
    assert!(matches!(r, Err(Error::Config(_))));
    let z = tensor(&[vec![0.0, 0.0], vec![0.0, 1.0]]);
    let r = eval(|t| {
        let a = t.constant(z.clone());
        info_nce(t, a, 1, a, 0, 1.0)
    });
    assert!(matches!(r, Err(Error::Degenerate(_))));
}

#[test]
fn info_nce_gradient() {
    let a = tensor(&rand_rows(4, 4, 4));
    let c = tensor(&rand_rows(5, 4, 4));
    let rep = gradient_check(|t, v| info_nce(t, v[0], 1, v[1], 2, 0.5), &[a, c], 1e-5).unwrap();
    assert!(rep.worst() < 1e-6, "{rep:?}");
}

#[test]
fn consistency_matches_brute_force() {
    for (seed, n, d) in [(1, 4, 3), (2, 8, 5), (3, 2, 7), (4, 1, 3)] {
        let zl = rand_rows(seed, n, d);
        let zh = rand_rows(seed + 100, n, d);
        for set in [
            CandidateSet::AllButAnchor,
            CandidateSet::IncludeAnchor,
            CandidateSet::OtherScale,
        ] {
            let got = eval(|t| {
                let (a, b) = (t.constant(tensor(&zl)), t.constant(tensor(&zh)));
                cross_consistency_loss(t, a, b, 0.07, set)
            })
            .unwrap();
            let want = naive_cc(&zl, &zh, 0.07, set);
            assert!((got - want).abs() < 1e-10, "{set} n={n}: {got} vs {want}");
        }
    }
}

#[test]
fn consistency_symmetries() {
    let zl = rand_rows(9, 6, 4);
    let zh = rand_rows(10, 6, 4);
    let run = |a: &[Vec<f64>], b: &[Vec<f64>]| {
        eval(|t| {
            let (a, b) = (t.constant(tensor(a)), t.constant(tensor(b)));
            cross_consistency_loss(t, a, b, 0.07, CandidateSet::AllButAnchor)
        })
        .unwrap()
    };
    let base = run(&zl, &zh);
    assert!(base > 0.0);
    assert!((base - run(&zh, &zl)).abs() < 1e-12);
    let perm = [3, 0, 5, 1, 4, 2];
    let pl: Vec<_> = perm.iter().map(|&i| zl[i].clone()).collect();
    let ph: Vec<_> = perm.iter().map(|&i| zh[i].clone()).collect();
    assert!((base - run(&pl, &ph)).abs() < 1e-12);
}

#[test]
fn single_pair_without_other_candidates_is_zero() {
    let zl = rand_rows(1, 1, 3);
    let zh = rand_rows(2, 1, 3);
    let l = eval(|t| {
        let (a, b) = (t.constant(tensor(&zl)), t.constant(tensor(&zh)));
        cross_consistency_loss(t, a, b, 0.07, CandidateSet::AllButAnchor)
    })
    .unwrap();
    assert_eq!(l, 0.0);
}

#[test]
fn consistency_gradient() {
    let zl = tensor(&rand_rows(21, 4, 3));
    let zh = tensor(&rand_rows(22, 4, 3));
    let rep = gradient_check(
        |t, v| cross_consistency_loss(t, v[0], v[1], 0.5, CandidateSet::AllButAnchor),
        &[zl, zh],
        1e-5,
    )
    .unwrap();
    assert!(rep.worst() < 1e-6, "{rep:?}");
}

#[test]
fn positive_only_distance_values() {
    let z = rand_rows(5, 3, 4);
    let same = eval(|t| {
        let a = t.constant(tensor(&z));
        positive_only_distance(t, a, a)
    })
    .unwrap();
    assert!(same.abs() < 1e-12);
    let neg: Vec<Vec<f64>> = z.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
    let opp = eval(|t| {
        let (a, b) = (t.constant(tensor(&z)), t.constant(tensor(&neg)));
        positive_only_distance(t, a, b)
    })
    .unwrap();
    assert!((opp - 2.0).abs() < 1e-12);
}

const GELU_C: f64 = 0.797_884_560_802_865_4;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Two-layer MLP weights `(w1 [d,h], b1, w2 [h,d], b2)`.
struct Mlp {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    d: usize,
    h: usize,
}

impl Mlp {
    fn random(seed: u64, d: usize, h: usize) -> Self {
        let mut r = Streams::new(seed).stream("mlp", &[]);
        let mut v = |n: usize| {
            (0..n)
                .map(|_| r.random_range(-0.5..0.5))
                .collect::<Vec<f64>>()
        };
        Mlp {
            w1: v(d * h),
            b1: v(h),
            w2: v(h * d),
            b2: v(d),
            d,
            h,
        }
    }

    fn naive(&self, x: &[f64]) -> Vec<f64> {
        let hid: Vec<f64> = (0..self.h)
            .map(|j| {
                gelu(
                    self.b1[j]
                        + (0..self.d)
                            .map(|i| x[i] * self.w1[i * self.h + j])
                            .sum::<f64>(),
                )
            })
            .collect();
        (0..self.d)
            .map(|o| {
                self.b2[o]
                    + (0..self.h)
                        .map(|j| hid[j] * self.w2[j * self.d + o])
                        .sum::<f64>()
            })
            .collect()
    }

    fn on_tape(&self, t: &Tape<f64>, x: Var) -> crate::Result<Var> {
        let w1 = t.constant(Tensor::new(vec![self.d, self.h], self.w1.clone())?);
        let b1 = t.constant(Tensor::new(vec![self.h], self.b1.clone())?);
        let w2 = t.constant(Tensor::new(vec![self.h, self.d], self.w2.clone())?);
        let b2 = t.constant(Tensor::new(vec![self.d], self.b2.clone())?);
        let h = t.linear(x, w1, Some(b1))?;
        t.linear(t.gelu(h), w2, Some(b2))
    }
}

fn seq(seed: u64, n: usize, tok: usize, d: usize) -> Tensor<f64> {
    let rows = rand_rows(seed, n * tok, d);
    Tensor::new(vec![n, tok, d], rows.concat()).unwrap()
}

#[test]
fn prediction_matches_brute_force() {
    let (n, tok, d) = (5, 4, 3);
    let mlp = Mlp::random(7, d, 2 * d);
    let fl = seq(1, n, tok, d);
    let fh = seq(2, n, tok, d);
    let got = eval(|t| {
        let (a, b) = (t.constant(fl.clone()), t.constant(fh.clone()));
        cross_prediction_loss(t, a, b, |x| mlp.on_tape(t, x), true)
    })
    .unwrap();
    let mut want = 0.0;
    for k in 0..n {
        let mut item = 0.0;
        for j in 0..tok {
            let off = (k * tok + j) * d;
            let p = mlp.naive(&fl.data()[off..off + d]);
            for i in 0..d {
                item += (fh.data()[off + i] - p[i]).powi(2);
            }
        }
        want += item / (tok * d) as f64;
    }
    want /= n as f64;
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
}

#[test]
fn exact_prediction_and_constant_offset() {
    let f = seq(3, 2, 4, 3);
    let zero = eval(|t| {
        let a = t.constant(f.clone());
        cross_prediction_loss(t, a, a, Ok, true)
    })
    .unwrap();
    assert_eq!(zero, 0.0);
    let eps = 0.125;
    let shifted = f.map(|v| v + eps);
    let l = eval(|t| {
        let (a, b) = (t.constant(f.clone()), t.constant(shifted.clone()));
        cross_prediction_loss(t, a, b, Ok, true)
    })
    .unwrap();
    assert!((l - eps * eps).abs() < 1e-12);
}

#[test]
fn stop_gradient_on_target() {
    let mlp = Mlp::random(8, 3, 6);
    for stop in [true, false] {
        let t = Tape::new();
        let a = t.param(&seq(4, 2, 4, 3));
        let b = t.param(&seq(5, 2, 4, 3));
        let l = cross_prediction_loss(&t, a, b, |x| mlp.on_tape(&t, x), stop).unwrap();
        let g = t.backward(l).unwrap().get_or_zeros(b);
        let nonzero = g.data().iter().any(|v| *v != 0.0);
        assert_eq!(nonzero, !stop);
    }
}

#[test]
fn prediction_shape_mismatch() {
    let r = eval(|t| {
        let (a, b) = (t.constant(seq(1, 2, 4, 3)), t.constant(seq(1, 2, 3, 3)));
        cross_prediction_loss(t, a, b, Ok, true)
    });
    assert!(matches!(r, Err(Error::Consistency(_))));
}

#[test]
fn contrastive_prediction_prefers_matching_item() {
    let f = seq(6, 4, 3, 2);
    let other = seq(7, 4, 3, 2);
    let matched = eval(|t| {
        let a = t.constant(f.clone());
        cross_prediction_contrastive(t, a, a, Ok, true, 0.1)
    })
    .unwrap();
    let random = eval(|t| {
        let (a, b) = (t.constant(f.clone()), t.constant(other.clone()));
        cross_prediction_contrastive(t, a, b, Ok, true, 0.1)
    })
    .unwrap();
    assert!(matched < random);
}

fn masks(seed: u64, n: usize, s: usize, m: f64) -> Vec<MaskSpec> {
    let st = Streams::new(seed);
    (0..n)
        .map(|i| MaskSpec::sample(s, m, &mut st.stream("m", &[i as u64])).unwrap())
        .collect()
}

fn naive_branch(
    pred: &Tensor<f64>,
    target: &Tensor<f64>,
    masks: &[MaskSpec],
    masked_only: bool,
) -> f64 {
    let sh = pred.shape();
    let (n, s, pd) = (sh[0], sh[1], sh[2]);
    let mut total = 0.0;
    for (k, m) in masks.iter().enumerate().take(n) {
        let idx: Vec<usize> = if masked_only {
            m.masked().to_vec()
        } else {
            (0..s).collect()
        };
        if idx.is_empty() {
            continue;
        }
        let mut item = 0.0;
        for &p in &idx {
            for i in 0..pd {
                let o = (k * s + p) * pd + i;
                item += (pred.data()[o] - target.data()[o]).powi(2);
            }
        }
        total += item / (idx.len() * pd) as f64;
    }
    total / n as f64
}

#[test]
fn reconstruction_matches_brute_force() {
    let (n, s, pd) = (6, 16, 12);
    for masked_only in [true, false] {
        for m in [0.0, 0.5, 0.75] {
            let (pl, tl) = (seq(10, n, s, pd), seq(11, n, s, pd));
            let (ph, th) = (seq(12, n, s, pd), seq(13, n, s, pd));
            let (ml, mh) = (masks(14, n, s, m), masks(15, n, s, m));
            let got = eval(|t| {
                let a = branch_reconstruction(t, t.constant(pl.clone()), &tl, &ml, masked_only)?;
                let b = branch_reconstruction(t, t.constant(ph.clone()), &th, &mh, masked_only)?;
                t.add(a, b)
            })
            .unwrap();
            let want =
                naive_branch(&pl, &tl, &ml, masked_only) + naive_branch(&ph, &th, &mh, masked_only);
            assert!(
                (got - want).abs() < 1e-10,
                "m={m} masked_only={masked_only}"
            );
        }
    }
}

#[test]
fn reconstruction_special_cases() {
    let p = seq(1, 2, 16, 12);
    let ms = masks(2, 2, 16, 0.5);
    let exact = eval(|t| branch_reconstruction(t, t.constant(p.clone()), &p, &ms, true)).unwrap();
    assert_eq!(exact, 0.0);
    let c = 0.25;
    let both = eval(|t| {
        let a = branch_reconstruction(t, t.constant(p.map(|v| v + c)), &p, &ms, false)?;
        let b = branch_reconstruction(t, t.constant(p.map(|v| v - c)), &p, &ms, false)?;
        t.add(a, b)
    })
    .unwrap();
    assert!((both - 2.0 * c * c).abs() < 1e-12);
    let none = masks(3, 2, 16, 0.0);
    let empty = eval(|t| branch_reconstruction(t, t.constant(p.map(|v| v + 1.0)), &p, &none, true))
        .unwrap();
    assert_eq!(empty, 0.0);
}

#[test]
fn total_is_unit_weight_sum() {
    let t = Tape::<f64>::new();
    let c = |v: f64| t.constant(Tensor::scalar(v));
    let terms = LossTerms {
        cc: Some(c(0.5)),
        cp: Some(c(0.25)),
        re: Some(c(0.25)),
    };
    let (v, rep) = total_loss(&t, terms, LossWeights::default()).unwrap();
    assert_eq!(t.value(v).item(), 1.0);
    assert_eq!(rep.total, 1.0);

    let re_only = LossTerms {
        re: Some(c(0.3125)),
        ..LossTerms::default()
    };
    let (_, rep) = total_loss(&t, re_only, LossWeights::default()).unwrap();
    assert_eq!(rep.total, 0.3125);
    assert_eq!(rep.l_re, Some(0.3125));
    assert!(rep.l_cc.is_none() && rep.l_cp.is_none());

    let weighted = LossWeights {
        cc: 2.0,
        ..LossWeights::default()
    };
    let (v, rep) = total_loss(&t, terms, weighted).unwrap();
    assert_eq!(t.value(v).item(), 1.5);
    assert_eq!(rep.total, 1.5);

    let none = total_loss(&t, LossTerms::default(), LossWeights::default());
    assert!(matches!(none, Err(Error::Config(_))));
}

#[test]
fn report_names_the_broken_component() {
    let r = LossReport {
        l_cc: Some(0.1),
        l_cp: Some(f64::NAN),
        l_re: None,
        total: f64::NAN,
    };
    assert!(!r.is_finite());
    assert_eq!(r.non_finite_component(), Some("l_cp"));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn consistency_nonnegative_and_oracle_equal(seed in 0u64..100_000, n in 2usize..=8, d in 2usize..6) {
            let zl = rand_rows(seed, n, d);
            let zh = rand_rows(seed ^ 0xabc, n, d);
            let got = eval(|t| {
                let (a, b) = (t.constant(tensor(&zl)), t.constant(tensor(&zh)));
                cross_consistency_loss(t, a, b, 0.07, CandidateSet::AllButAnchor)
            }).unwrap();
            prop_assert!(got > 0.0);
            let want = naive_cc(&zl, &zh, 0.07, CandidateSet::AllButAnchor);
            prop_assert!((got - want).abs() < 1e-10);
        }

        #[test]
        fn prediction_and_reconstruction_nonnegative(seed in 0u64..100_000) {
            let p = seq(seed, 2, 16, 4);
            let q = seq(seed + 1, 2, 16, 4);
            let ms = masks(seed, 2, 16, 0.5);
            let re = eval(|t| branch_reconstruction(t, t.constant(p.clone()), &q, &ms, true)).unwrap();
            let cp = eval(|t| {
                let (a, b) = (t.constant(p.clone()), t.constant(q.clone()));
                cross_prediction_loss(t, a, b, Ok, true)
            }).unwrap();
            prop_assert!(re > 0.0 && cp > 0.0);
        }
    }
}
