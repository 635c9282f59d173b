use crate::numerics::{Element, Tape, Var};
use crate::{Error, Result};

/// Per-step loss values; `None` marks a disabled component.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_cc: Option<f64>,
    pub l_cp: Option<f64>,
    pub l_re: Option<f64>,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_cc, self.l_cp, self.l_re]
            .iter()
            .flatten()
            .all(|v| v.is_finite())
            && self.total.is_finite()
    }

    /// Name of the first non-finite component, if any.
    pub fn non_finite_component(&self) -> Option<&'static str> {
        let named = [
            ("l_cc", self.l_cc),
            ("l_cp", self.l_cp),
            ("l_re", self.l_re),
        ];
        named
            .into_iter()
            .find(|(_, v)| v.is_some_and(|v| !v.is_finite()))
            .map(|(n, _)| n)
            .or((!self.total.is_finite()).then_some("total"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub cc: f64,
    pub cp: f64,
    pub re: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            cc: 1.0,
            cp: 1.0,
            re: 1.0,
        }
    }
}

/// Graph handles of the enabled components.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossTerms {
    pub cc: Option<Var>,
    pub cp: Option<Var>,
    pub re: Option<Var>,
}

/// Weighted sum of the enabled components and the matching report.
pub fn total_loss<T: Element>(
    tape: &Tape<T>,
    terms: LossTerms,
    weights: LossWeights,
) -> Result<(Var, LossReport)> {
    let parts = [
        (terms.cc, weights.cc),
        (terms.cp, weights.cp),
        (terms.re, weights.re),
    ];
    let mut total: Option<Var> = None;
    for (v, w) in parts.iter().filter_map(|(v, w)| v.map(|v| (v, *w))) {
        let term = if w == 1.0 { v } else { tape.scale(v, T::of(w)) };
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    let total = total.ok_or_else(|| Error::config("every loss component is disabled"))?;
    let value = |v: Option<Var>| v.map(|v| tape.value(v).item().f64());
    let (l_cc, l_cp, l_re) = (value(terms.cc), value(terms.cp), value(terms.re));
    let total_value = [(l_cc, weights.cc), (l_cp, weights.cp), (l_re, weights.re)]
        .iter()
        .filter_map(|(v, w)| v.map(|v| v * w))
        .sum();
    let report = LossReport {
        l_cc,
        l_cp,
        l_re,
        total: total_value,
    };
    Ok((total, report))
}
