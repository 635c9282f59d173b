use crate::numerics::{Element, Tape, Var};
use crate::{Error, Result};

/// Which embeddings of the batch compete with the positive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CandidateSet {
    /// All `2N` embeddings except the anchor itself.
    AllButAnchor,
    /// All `2N` embeddings, the anchor included.
    IncludeAnchor,
    /// Only the `N` embeddings of the other scale.
    OtherScale,
}

impl std::str::FromStr for CandidateSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all_but_anchor" => Ok(CandidateSet::AllButAnchor),
            "include_anchor" => Ok(CandidateSet::IncludeAnchor),
            "other_scale" => Ok(CandidateSet::OtherScale),
            _ => Err(Error::config(format!("unknown candidate set {s:?}"))),
        }
    }
}

impl std::fmt::Display for CandidateSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CandidateSet::AllButAnchor => "all_but_anchor",
            CandidateSet::IncludeAnchor => "include_anchor",
            CandidateSet::OtherScale => "other_scale",
        })
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("temperature {tau} must be positive")))
    }
}

/// `-log softmax_c(cos(z_a[k], c)/τ)[positive]` over the rows of `candidates`.
pub fn info_nce<T: Element>(
    tape: &Tape<T>,
    anchors: Var,
    k: usize,
    candidates: Var,
    positive: usize,
    tau: f64,
) -> Result<Var> {
    check_tau(tau)?;
    let (sa, sc) = (tape.shape(anchors), tape.shape(candidates));
    if sa.len() != 2 || sc.len() != 2 || sa[1] != sc[1] || k >= sa[0] || positive >= sc[0] {
        return Err(Error::shape("info_nce", &sa, &sc));
    }
    let a = tape.reshape(anchors, &[1, sa[0], sa[1]])?;
    let a = tape.gather_tokens(a, &[vec![k]])?;
    let a = tape.reshape(a, &[1, sa[1]])?;
    let a = tape.l2_normalize(a)?;
    let c = tape.l2_normalize(candidates)?;
    let ct = tape.transpose(c)?;
    let s = tape.matmul(a, ct)?;
    let s = tape.scale(s, T::of(1.0 / tau));
    tape.cross_entropy(s, &[positive], None)
}

/// Symmetric InfoNCE between the two branches: every one of the `2N` rows of
/// `[z_l; z_h]` is an anchor whose positive is its other-scale twin, averaged
/// over all `2N` anchors.
pub fn cross_consistency_loss<T: Element>(
    tape: &Tape<T>,
    z_l: Var,
    z_h: Var,
    tau: f64,
    candidates: CandidateSet,
) -> Result<Var> {
    check_tau(tau)?;
    let (sl, sh) = (tape.shape(z_l), tape.shape(z_h));
    if sl.len() != 2 || sl != sh || sl[0] == 0 {
        return Err(Error::shape("cross_consistency_loss", &sl, &sh));
    }
    let n = sl[0];
    let z = tape.concat0(z_l, z_h)?;
    let z = tape.l2_normalize(z)?;
    let zt = tape.transpose(z)?;
    let s = tape.matmul(z, zt)?;
    let s = tape.scale(s, T::of(1.0 / tau));
    let m = 2 * n;
    let targets: Vec<usize> = (0..m).map(|i| (i + n) % m).collect();
    let allowed: Vec<bool> = (0..m * m)
        .map(|ij| {
            let (i, j) = (ij / m, ij % m);
            match candidates {
                CandidateSet::AllButAnchor => i != j,
                CandidateSet::IncludeAnchor => true,
                CandidateSet::OtherScale => (i < n) != (j < n),
            }
        })
        .collect();
    tape.cross_entropy(s, &targets, Some(&allowed))
}

/// Positive-only variant: mean over items of `1 - cos(z_l[k], z_h[k])`.
pub fn positive_only_distance<T: Element>(tape: &Tape<T>, z_l: Var, z_h: Var) -> Result<Var> {
    let (sl, sh) = (tape.shape(z_l), tape.shape(z_h));
    if sl.len() != 2 || sl != sh || sl[0] == 0 {
        return Err(Error::shape("positive_only_distance", &sl, &sh));
    }
    let a = tape.l2_normalize(z_l)?;
    let b = tape.l2_normalize(z_h)?;
    let p = tape.mul(a, b)?;
    let cos_sum = tape.sum(p);
    let n = sl[0] as f64;
    let mean_cos = tape.scale(cos_sum, T::of(1.0 / n));
    let one = tape.constant(crate::numerics::Tensor::scalar(T::one()));
    tape.sub(one, mean_cos)
}
