//! TOML model configuration: parsing, validation (collecting every
//! violation, not just the first) and a canonical content digest.

use std::path::Path;

use serde::Deserialize;
use sha2::{Digest, Sha256};

use crate::abm::{ContactSchedule, ModelConfig};
use crate::error::{Error, Result};
use crate::infectivity::InfectivityLaw;
use crate::matrix::SqMat;
use crate::mobility::{Compartment, PiecewiseMatrices, RateSchedule};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSection {
    groups: usize,
    patches: usize,
    gamma: f64,
    horizon: f64,
    population: usize,
    #[serde(default)]
    seed: u64,
    mc_curve_samples: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InitialSection {
    s: Vec<f64>,
    i: Vec<f64>,
    r: Vec<f64>,
}

/// Contact rates: either a single scalar, one constant matrix, or a
/// piecewise-constant list of matrices with breakpoints. Matrices are
/// (K*L) x (K*L), row cell index `e = k * L + l`.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContactSection {
    scalar: Option<f64>,
    matrix: Option<Vec<Vec<f64>>>,
    breakpoints: Option<Vec<f64>>,
    matrices: Option<Vec<Vec<Vec<f64>>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InfectivitySection {
    new: InfectivityLaw,
    /// Law of the initially infected; defaults to `new`.
    initial: Option<InfectivityLaw>,
}

/// One migration schedule entry. Applies to the listed groups and
/// compartments (defaults: all groups, all compartments).
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct MobilitySection {
    groups: Option<Vec<usize>>,
    compartments: Option<Vec<String>>,
    #[serde(default = "default_breakpoints")]
    breakpoints: Vec<f64>,
    matrices: Vec<Vec<Vec<f64>>>,
}

fn default_breakpoints() -> Vec<f64> {
    vec![0.0]
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    model: ModelSection,
    initial: InitialSection,
    contact: ContactSection,
    infectivity: Vec<InfectivitySection>,
    #[serde(default)]
    mobility: Vec<MobilitySection>,
}

fn flatten_matrix(rows: &[Vec<f64>], dim: usize, what: &str, errors: &mut Vec<String>) -> Vec<f64> {
    let mut flat = Vec::with_capacity(dim * dim);
    if rows.len() != dim {
        errors.push(format!("{what}: expected {dim} rows, got {}", rows.len()));
        return vec![0.0; dim * dim];
    }
    for (i, r) in rows.iter().enumerate() {
        if r.len() != dim {
            errors.push(format!(
                "{what}: row {i} has {} entries, expected {dim}",
                r.len()
            ));
            return vec![0.0; dim * dim];
        }
        flat.extend_from_slice(r);
    }
    flat
}

fn build_contact(
    sec: &ContactSection,
    cells: usize,
    errors: &mut Vec<String>,
) -> Option<ContactSchedule> {
    let count = [
        sec.scalar.is_some(),
        sec.matrix.is_some(),
        sec.matrices.is_some(),
    ]
    .iter()
    .filter(|b| **b)
    .count();
    if count != 1 {
        errors.push("contact: exactly one of scalar, matrix, matrices is required".into());
        return None;
    }
    let result = if let Some(s) = sec.scalar {
        ContactSchedule::scalar(s, cells)
    } else if let Some(m) = &sec.matrix {
        let flat = flatten_matrix(m, cells, "contact.matrix", errors);
        ContactSchedule::constant(flat, cells)
    } else {
        let mats = sec.matrices.as_ref().unwrap();
        let bps = sec.breakpoints.clone().unwrap_or_else(|| vec![0.0]);
        let flats = mats
            .iter()
            .enumerate()
            .map(|(i, m)| flatten_matrix(m, cells, &format!("contact.matrices[{i}]"), errors))
            .collect();
        ContactSchedule::new(bps, flats, cells)
    };
    match result {
        Ok(c) => Some(c),
        Err(Error::Config(mut errs)) => {
            errors.append(&mut errs);
            None
        }
        Err(e) => {
            errors.push(e.to_string());
            None
        }
    }
}

fn parse_compartment(name: &str) -> Option<Compartment> {
    match name {
        "S" | "s" => Some(Compartment::S),
        "I" | "i" => Some(Compartment::I),
        "R" | "r" => Some(Compartment::R),
        _ => None,
    }
}

fn build_mobility(
    sections: &[MobilitySection],
    num_groups: usize,
    num_patches: usize,
    errors: &mut Vec<String>,
) -> RateSchedule {
    let mut sched = RateSchedule::zero(num_groups, num_patches);
    for (i, sec) in sections.iter().enumerate() {
        let what = format!("mobility[{i}]");
        let mut mats = Vec::with_capacity(sec.matrices.len());
        let mut ok = true;
        for (j, rows) in sec.matrices.iter().enumerate() {
            let flat = flatten_matrix(rows, num_patches, &format!("{what}.matrices[{j}]"), errors);
            match SqMat::from_rows(
                &flat
                    .chunks(num_patches)
                    .map(|c| c.to_vec())
                    .collect::<Vec<_>>(),
            ) {
                Ok(m) => mats.push(m),
                Err(e) => {
                    errors.push(format!("{what}: {e}"));
                    ok = false;
                }
            }
        }
        if !ok {
            continue;
        }
        let piecewise = match PiecewiseMatrices::new(sec.breakpoints.clone(), mats) {
            Ok(p) => p,
            Err(Error::Config(mut errs)) => {
                errors.extend(errs.drain(..).map(|e| format!("{what}: {e}")));
                continue;
            }
            Err(e) => {
                errors.push(format!("{what}: {e}"));
                continue;
            }
        };
        let groups: Vec<usize> = sec
            .groups
            .clone()
            .unwrap_or_else(|| (0..num_groups).collect());
        let comps: Vec<Compartment> = match &sec.compartments {
            None => Compartment::ALL.to_vec(),
            Some(names) => {
                let mut out = Vec::new();
                for n in names {
                    match parse_compartment(n) {
                        Some(c) => out.push(c),
                        None => errors.push(format!("{what}: unknown compartment {n:?}")),
                    }
                }
                out
            }
        };
        for &g in &groups {
            if g >= num_groups {
                errors.push(format!("{what}: group index {g} out of range"));
                continue;
            }
            for &c in &comps {
                if let Err(e) = sched.set(g, c, piecewise.clone()) {
                    errors.push(format!("{what}: {e}"));
                }
            }
        }
    }
    sched
}

fn build(file: ConfigFile) -> Result<ModelConfig> {
    let mut errors = Vec::new();
    let cells = file.model.groups * file.model.patches;
    if cells == 0 {
        return Err(Error::Config(vec![
            "model.groups and model.patches must be >= 1".into(),
        ]));
    }
    let contact = build_contact(&file.contact, cells, &mut errors);
    if file.infectivity.len() != file.model.groups {
        errors.push(format!(
            "infectivity: expected one entry per group ({}), got {}; infectivity[{}] missing",
            file.model.groups,
            file.infectivity.len(),
            file.infectivity.len()
        ));
    }
    let nu = build_mobility(
        &file.mobility,
        file.model.groups,
        file.model.patches,
        &mut errors,
    );
    if !errors.is_empty() {
        return Err(Error::Config(errors));
    }
    let mut lambda_new = Vec::with_capacity(file.model.groups);
    let mut lambda_initial = Vec::with_capacity(file.model.groups);
    for sec in &file.infectivity {
        lambda_new.push(sec.new.clone());
        lambda_initial.push(sec.initial.clone().unwrap_or_else(|| sec.new.clone()));
    }
    let cfg = ModelConfig {
        num_groups: file.model.groups,
        num_patches: file.model.patches,
        gamma: file.model.gamma,
        beta: contact.expect("contact validated above"),
        nu,
        lambda_new,
        lambda_initial,
        s0: file.initial.s,
        i0: file.initial.i,
        r0: file.initial.r,
        population: file.model.population,
        horizon: file.model.horizon,
        seed: file.model.seed,
        mc_curve_samples: file.model.mc_curve_samples,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Parse and fully validate a configuration document.
pub fn parse_config(text: &str) -> Result<ModelConfig> {
    let file: ConfigFile =
        toml::from_str(text).map_err(|e| Error::Config(vec![format!("parse error: {e}")]))?;
    build(file)
}

/// Load a configuration file from disk.
pub fn load_config(path: &Path) -> Result<ModelConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

fn canonicalize(value: &toml::Value, out: &mut String) {
    match value {
        toml::Value::Table(t) => {
            let mut keys: Vec<&String> = t.keys().collect();
            keys.sort();
            out.push('{');
            for k in keys {
                out.push_str(k);
                out.push('=');
                canonicalize(&t[k], out);
                out.push(';');
            }
            out.push('}');
        }
        toml::Value::Array(a) => {
            out.push('[');
            for v in a {
                canonicalize(v, out);
                out.push(',');
            }
            out.push(']');
        }
        toml::Value::Float(f) => out.push_str(&format!("{f:?}")),
        other => out.push_str(&other.to_string()),
    }
}

/// Content digest of a configuration document, invariant under key
/// reordering and formatting.
pub fn document_digest(text: &str) -> Result<String> {
    let value: toml::Value =
        toml::from_str(text).map_err(|e| Error::Config(vec![format!("parse error: {e}")]))?;
    let mut canon = String::new();
    canonicalize(&value, &mut canon);
    let mut hasher = Sha256::new();
    hasher.update(canon.as_bytes());
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}
