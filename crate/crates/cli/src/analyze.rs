//! `analyze`: norm profile of a dump and, given a second dump, CKA between
//! the two under the requested conditions.

use std::path::Path;

use tirlab::analysis::{cka_report, dump_norm_profile, tables, ActivationDump, Condition};

use crate::CliError;

pub struct AnalyzeRequest<'a> {
    pub dump: &'a Path,
    pub target: Option<&'a Path>,
    pub conditions: Vec<Condition>,
    pub layer: Option<usize>,
}

pub struct AnalyzeOutput {
    pub norm_profile_csv: String,
    pub cka_csv: Option<String>,
}

fn load(path: &Path) -> Result<ActivationDump, CliError> {
    ActivationDump::load(path).map_err(|e| CliError::stage("load", format!("{}: {e}", path.display())))
}

pub fn analyze(req: &AnalyzeRequest) -> Result<AnalyzeOutput, CliError> {
    if req.target.is_none() && !req.conditions.is_empty() {
        return Err(CliError::Config("--condition needs a second dump (--target) to compare against".into()));
    }
    let source = load(req.dump)?;
    let stage = |e: tirlab::Error| CliError::stage("analyze", e);
    let mut buf = Vec::new();
    tables::write_norm_profile(&dump_norm_profile(&source).map_err(stage)?, &mut buf).map_err(stage)?;
    let norm_profile_csv = String::from_utf8(buf).expect("ascii csv");
    let cka_csv = match req.target {
        None => None,
        Some(t) => {
            let target = load(t)?;
            let conditions = if req.conditions.is_empty() { Condition::ALL.to_vec() } else { req.conditions.clone() };
            let report = cka_report(&source, &target, req.layer, &conditions).map_err(stage)?;
            let mut buf = Vec::new();
            tables::write_cka(&report, &mut buf).map_err(stage)?;
            Some(String::from_utf8(buf).expect("ascii csv"))
        }
    };
    Ok(AnalyzeOutput { norm_profile_csv, cka_csv })
}
