use super::trainer::StepLog;

pub const CSV_HEADER: &str = "step,lr,l_cc,l_cp,l_re,total";

/// One CSV row; disabled components are left empty.
pub fn csv_row(log: &StepLog) -> String {
    let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
    let r = &log.report;
    format!(
        "{},{},{},{},{},{}",
        log.step,
        log.lr,
        opt(r.l_cc),
        opt(r.l_cp),
        opt(r.l_re),
        r.total
    )
}
