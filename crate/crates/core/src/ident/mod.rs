//! Identifiability verdicts and certificates.
//!
//! ```
//! use bifactor::{fixtures, ident, Link};
//!
//! let v = ident::check_standard(&fixtures::case(2, Link::Probit).unwrap(), &Default::default()).unwrap();
//! assert_eq!(v.status, ident::Status::NonIdentifiable);
//! assert!(v.certificate.unwrap().moment_distance < 1e-8);
//! ```

mod certificate;
mod probe;

pub use certificate::{
    any_param_distance, construct_case2c_certificate, construct_extended_rho_perturbation,
    construct_main_scaling_certificate, construct_rotation_certificate, construct_scaling_certificate,
    construct_theorem10_certificate, main_in_testlet_span, moment_distance, rotatable_pair, verify_certificate,
    CertError, Certificate, Construction, MAX_MOMENT_DISTANCE, MIN_PARAM_DISTANCE, RANGE_TOL,
};
pub use probe::{perturbation_search, probe_equivalence, PerturbationReport, ProbeConfig};

use crate::io::AnyParams;
use crate::linalg::rows_full_column_rank;
use crate::model::{Link, LoadingStructure, ModelError, ModelKind, ModelParams, UnrestrictedRhoParams};
use crate::structure::{report, Decision, SearchConfig, StructuralReport};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Identifiable,
    NonIdentifiable,
    Undetermined,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub status: Status,
    /// Condition that fired, such as "P1", "E2N-violated" or "T3S".
    pub rule: String,
    /// Case of the standard-model proof taxonomy (1a to 3).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub proof_case: Option<String>,
    pub kind: ModelKind,
    pub link: Link,
    pub evidence: StructuralReport,
    pub notes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub certificate: Option<Certificate>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CheckError {
    #[error("expected a {expected:?} model, got {got:?}")]
    WrongKind { expected: ModelKind, got: ModelKind },
    #[error(transparent)]
    Invalid(#[from] ModelError),
}

#[derive(Debug, Clone, Copy)]
pub struct CheckOptions {
    pub search: SearchConfig,
    /// Run the numerical probe when no theorem decides.
    pub probe: bool,
    pub probe_config: ProbeConfig,
    /// Build certificates for non-identifiable verdicts.
    pub certificates: bool,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions { search: SearchConfig::default(), probe: true, probe_config: ProbeConfig::default(), certificates: true }
    }
}

fn tolerance_note(s: &LoadingStructure) -> String {
    format!("loadings with |a| <= {:e} count as zero", s.zero_tol)
}

fn verdict(p: &ModelParams, evidence: StructuralReport, status: Status, rule: &str) -> Verdict {
    Verdict {
        status,
        rule: rule.to_string(),
        proof_case: None,
        kind: p.kind,
        link: p.link,
        notes: vec![tolerance_note(&p.structure)],
        evidence,
        certificate: None,
    }
}

fn expect_kind(p: &ModelParams, kind: ModelKind) -> Result<(), CheckError> {
    if p.kind != kind {
        return Err(CheckError::WrongKind { expected: kind, got: p.kind });
    }
    p.validate()?;
    Ok(())
}

/// Attach a certificate, or a note explaining why none was built.
fn attach(v: &mut Verdict, opts: &CheckOptions, build: impl FnOnce() -> Result<Certificate, CertError>) {
    if !opts.certificates {
        return;
    }
    match build() {
        Ok(c) => v.certificate = Some(c),
        Err(e) => v.notes.push(format!("certificate not built: {e}")),
    }
}

/// Standard bifactor model: identifiable iff P1 or P2. Both links share the
/// same conditions.
pub fn check_standard(p: &ModelParams, opts: &CheckOptions) -> Result<Verdict, CheckError> {
    expect_kind(p, ModelKind::Standard)?;
    let ev = report(&p.structure, p.kind, &opts.search);
    let all_q3 = ev.q_sizes.iter().all(|&q| q >= 3);
    let small_q = ev.q_sizes.iter().position(|&q| q <= 2);
    let h1 = ev.h1_len();
    let (status, rule, case) = if h1 >= 3 {
        if all_q3 {
            (Status::Identifiable, "P1", "1a")
        } else {
            (Status::NonIdentifiable, "P1-violated", "1b")
        }
    } else if h1 == 2 {
        if !all_q3 {
            (Status::NonIdentifiable, "P2-violated", "2a")
        } else if ev.h6_len() == 0 {
            (Status::NonIdentifiable, "P2-violated", "2b")
        } else if ev.h2_len() == 0 {
            (Status::NonIdentifiable, "P2-violated", "2c")
        } else {
            (Status::Identifiable, "P2", "2d")
        }
    } else {
        (Status::NonIdentifiable, "H1-too-small", "3")
    };
    let mut v = verdict(p, ev, status, rule);
    v.proof_case = Some(case.to_string());
    match case {
        "1b" | "2a" => attach(&mut v, opts, || construct_scaling_certificate(p, small_q.unwrap(), None)),
        "2b" => attach(&mut v, opts, || construct_main_scaling_certificate(p, None)),
        "2c" => {
            let g = v.evidence.h6.as_ref().unwrap()[0] - 1;
            attach(&mut v, opts, || construct_case2c_certificate(p, g, None))
        }
        "3" => attach(&mut v, opts, || construct_rotation_certificate(p, None)),
        _ => {}
    }
    Ok(v)
}

/// Which of the extended-model conditions hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ExtendedRules {
    pub e1n: bool,
    pub e2n: bool,
    pub e1s: bool,
    pub e2s: bool,
    pub e3s: bool,
}

pub fn extended_rules(p: &ModelParams, ev: &StructuralReport) -> ExtendedRules {
    let sg = p.sigma_g();
    let g = sg.nrows();
    let correlated = |a: usize| (0..g).any(|b| b != a && sg[(a, b)] != 0.0);
    let q = &ev.q_sizes;
    let all_q3 = q.iter().all(|&x| x >= 3);
    let e1n = (0..g).all(|a| q[a] >= 2 && (q[a] >= 3 || correlated(a)));
    let h3: Vec<usize> = ev.h3.iter().map(|x| x - 1).collect();
    let e2n = h3.len() >= 2;
    let kr = ev.kruskal.as_ref();
    let e3s = e1n
        && e2n
        && h3.iter().any(|&g1| {
            q[g1] >= 3
                && kr.and_then(|k| k[g1]) == Some(2)
                && h3.iter().any(|&g2| g2 != g1 && sg[(g1, g2)] != 0.0 && q[g2] >= 3)
        });
    ExtendedRules {
        e1n,
        e2n,
        e1s: all_q3 && h3.len() >= 3,
        e2s: all_q3 && h3.len() == 2 && ev.h2_len() >= 1,
        e3s,
    }
}

/// Extended bifactor model with correlated testlets. The necessary
/// conditions are checked first; a model meeting them but none of the
/// sufficient ones goes to the numerical probe.
pub fn check_extended(p: &ModelParams, opts: &CheckOptions) -> Result<Verdict, CheckError> {
    expect_kind(p, ModelKind::Extended)?;
    let ev = report(&p.structure, p.kind, &opts.search);
    let r = extended_rules(p, &ev);
    let sg = p.sigma_g();
    if !r.e1n {
        let g = (0..ev.q_sizes.len())
            .find(|&g| {
                let q = ev.q_sizes[g];
                let corr = (0..sg.nrows()).any(|h| h != g && sg[(g, h)] != 0.0);
                q < 2 || (q < 3 && !corr)
            })
            .unwrap();
        let mut v = verdict(p, ev, Status::NonIdentifiable, "E1N-violated");
        attach(&mut v, opts, || construct_scaling_certificate(p, g, None));
        return Ok(v);
    }
    if !r.e2n {
        let mut v = verdict(p, ev, Status::NonIdentifiable, "E2N-violated");
        attach(&mut v, opts, || construct_extended_rho_perturbation(p, None));
        return Ok(v);
    }
    for (holds, name) in [(r.e1s, "E1S"), (r.e2s, "E2S"), (r.e3s, "E3S")] {
        if holds {
            return Ok(verdict(p, ev, Status::Identifiable, name));
        }
    }
    let mut v = verdict(p, ev, Status::Undetermined, "no-sufficient-condition");
    v.notes.push("E1N and E2N hold but none of E1S, E2S, E3S does".into());
    probe_into(&mut v, p, opts);
    Ok(v)
}

fn probe_into(v: &mut Verdict, p: &ModelParams, opts: &CheckOptions) {
    if !opts.probe {
        return;
    }
    match probe_equivalence(p, &opts.probe_config) {
        Some(c) => {
            v.status = Status::NonIdentifiable;
            v.rule = "numerical-equivalence".into();
            v.certificate = Some(c);
        }
        None => v.notes.push("numerical probe found no equivalent parameters".into()),
    }
}

/// Some rows among `rows` have exactly one nonzero main loading, covering
/// every main factor. Such rows form the identity after scaling.
pub fn contains_identity(s: &LoadingStructure, rows: &[usize]) -> bool {
    (0..s.n_primary).all(|l| {
        rows.iter().any(|&j| (0..s.n_primary).all(|m| s.is_nonzero(s.loadings[(j, m)]) == (m == l)))
    })
}

fn items_of(s: &LoadingStructure, testlets: &[usize]) -> Vec<usize> {
    (0..s.n_items()).filter(|j| testlets.contains(&s.assignment[*j])).collect()
}

/// Largest testlet count for which T3S partitions are enumerated.
pub const T3S_MAX_TESTLETS: usize = 20;

/// A testlet split with the first part's full block and the second part's
/// main block both of full column rank, as 0-based testlet lists.
pub fn t3s_partition(s: &LoadingStructure, tol: f64) -> Option<(Vec<usize>, Vec<usize>)> {
    let g = s.n_testlets;
    if g > T3S_MAX_TESTLETS {
        return None;
    }
    let mains: Vec<usize> = (0..s.n_primary).collect();
    for mask in 1u32..(1u32 << g) - 1 {
        let g1: Vec<usize> = (0..g).filter(|&t| mask >> t & 1 == 1).collect();
        let g2: Vec<usize> = (0..g).filter(|&t| mask >> t & 1 == 0).collect();
        let mut cols = mains.clone();
        cols.extend(g1.iter().map(|&t| s.testlet_col(t)));
        let rows1 = items_of(s, &g1);
        let block1 = s.submatrix(&rows1, &cols);
        let all1: Vec<usize> = (0..rows1.len()).collect();
        if !rows_full_column_rank(&block1, &all1, tol) {
            continue;
        }
        let rows2 = items_of(s, &g2);
        let block2 = s.submatrix(&rows2, &mains);
        let all2: Vec<usize> = (0..rows2.len()).collect();
        if rows_full_column_rank(&block2, &all2, tol) {
            return Some((g1, g2));
        }
    }
    None
}

/// Two-tier model: identifiable when C0 (linear) or C1 (probit) holds with
/// one of T1S, T2S, T3S. These are sufficient only, so otherwise the
/// rotation construction and then the probe are tried.
pub fn check_two_tier(p: &ModelParams, opts: &CheckOptions) -> Result<Verdict, CheckError> {
    expect_kind(p, ModelKind::TwoTier)?;
    let s = &p.structure;
    let ev = report(s, p.kind, &opts.search);
    let (c_name, c) = match p.link {
        Link::Linear => ("C0", ev.c0.as_ref().map(|d| d.holds())),
        Link::Probit => ("C1", ev.c1.as_ref().map(|d| d.holds())),
    };
    let c_holds = c.unwrap_or(false);
    let c_undetermined = match p.link {
        Link::Linear => false,
        Link::Probit => matches!(ev.c1, Some(Decision::Undetermined)),
    };
    let h4: Vec<usize> = ev.h4.iter().map(|x| x - 1).collect();
    let id_h4 = contains_identity(s, &items_of(s, &h4));
    let t1s = h4.len() >= 3 && id_h4;
    let t2s = h4.len() >= 2 && !ev.h5.is_empty() && id_h4;
    let all: Vec<usize> = (0..s.n_items()).collect();
    let t3 = if contains_identity(s, &all) { t3s_partition(s, opts.search.rank_tol) } else { None };
    let t_rule = if t1s {
        Some("T1S")
    } else if t2s {
        Some("T2S")
    } else if t3.is_some() {
        Some("T3S")
    } else {
        None
    };
    if let (true, Some(t)) = (c_holds, t_rule) {
        let mut v = verdict(p, ev, Status::Identifiable, &format!("{c_name}+{t}"));
        if let Some((g1, g2)) = t3.filter(|_| t == "T3S") {
            let one = |v: Vec<usize>| v.iter().map(|x| (x + 1).to_string()).collect::<Vec<_>>().join(",");
            v.notes.push(format!("T3S partition: {{{}}} and {{{}}}", one(g1), one(g2)));
        }
        return Ok(v);
    }
    let mut v = verdict(p, ev, Status::Undetermined, "no-sufficient-condition");
    v.notes.push(match (c_holds, t_rule) {
        (false, _) if c_undetermined => format!("{c_name} search budget ran out"),
        (false, _) => format!("{c_name} fails"),
        _ => "none of T1S, T2S, T3S holds".to_string(),
    });
    if rotatable_pair(p).is_some() {
        if let Ok(c) = construct_rotation_certificate(p, None) {
            v.status = Status::NonIdentifiable;
            v.rule = "rotation-equivalence".into();
            v.certificate = Some(c);
            return Ok(v);
        }
    }
    probe_into(&mut v, p, opts);
    Ok(v)
}

/// Models with free primary-testlet correlations are never identifiable.
pub fn check_unrestricted_rho(p: &UnrestrictedRhoParams, opts: &CheckOptions) -> Result<Verdict, CheckError> {
    p.validate()?;
    let ev = report(&p.base.structure, ModelKind::Standard, &opts.search);
    let mut v = verdict(&p.base, ev, Status::NonIdentifiable, "Theorem10");
    let (_, rel) = main_in_testlet_span(&p.base.structure);
    v.notes.push(format!("main loadings residual off the testlet span: {rel:e}"));
    attach(&mut v, opts, || construct_theorem10_certificate(p, None));
    Ok(v)
}

/// Dispatch on the model kind.
pub fn check(p: &AnyParams, opts: &CheckOptions) -> Result<Verdict, CheckError> {
    match p {
        AnyParams::Unrestricted(u) => check_unrestricted_rho(u, opts),
        AnyParams::Restricted(m) => match m.kind {
            ModelKind::Standard => check_standard(m, opts),
            ModelKind::Extended => check_extended(m, opts),
            ModelKind::TwoTier => check_two_tier(m, opts),
        },
    }
}
