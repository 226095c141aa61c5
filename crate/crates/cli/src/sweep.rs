//! Cost-model sweeps: tree-size grids and method tables, both emitted as
//! plot-ready CSV.

use std::path::Path;

use specq_core::perf::{predict_methods, sweep_tree_size, MethodPrediction, SweepRow, TauTable};
use specq_core::{Error, Result};

use crate::config::{
    load_cost_profile, load_methods_config, load_sweep_config, read_file, sibling,
};

/// What a cost-sweep config produced.
pub enum SweepOutput {
    Grid(Vec<SweepRow>),
    Methods(Vec<MethodPrediction>),
}

impl SweepOutput {
    pub fn to_csv(&self) -> String {
        match self {
            SweepOutput::Grid(rows) => grid_csv(rows),
            SweepOutput::Methods(rows) => methods_csv(rows),
        }
    }
}

pub fn grid_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("scheme,d,n,tau,tv_over_tt,speedup\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6}\n",
            r.scheme, r.d, r.n, r.tau, r.tv_over_tt, r.speedup
        ));
    }
    out
}

pub fn methods_csv(rows: &[MethodPrediction]) -> String {
    let mut out = String::from("name,tau,per_token_s,tokens_per_s,speedup\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.6},{:.9},{:.6},{:.6}\n",
            r.name, r.tau, r.per_token_s, r.tokens_per_s, r.speedup
        ));
    }
    out
}

/// Runs the sweep described by `config_path`. A config with a `methods`
/// array predicts each method once; otherwise it must describe a (d, n)
/// grid with per-scheme accepted lengths.
pub fn run_cost_sweep(config_path: &Path) -> Result<SweepOutput> {
    let value: toml::Value = toml::from_str(&read_file(config_path)?)
        .map_err(|e| Error::config(format!("{}: {e}", config_path.display())))?;
    if value.get("methods").is_some() {
        run_methods(config_path)
    } else {
        run_grid(config_path)
    }
}

fn run_methods(config_path: &Path) -> Result<SweepOutput> {
    let config = load_methods_config(config_path)?;
    let profile = load_cost_profile(&sibling(config_path, &config.profile))?;
    let ctx_len = config.ctx_len.unwrap_or(profile.ctx_len);
    let model = profile.to_cost_model()?;
    Ok(SweepOutput::Methods(predict_methods(&model, ctx_len, &config.methods)?))
}

fn run_grid(config_path: &Path) -> Result<SweepOutput> {
    let config = load_sweep_config(config_path)?;
    let profile = load_cost_profile(&sibling(config_path, &config.profile))?;
    let ctx_len = config.ctx_len.unwrap_or(profile.ctx_len);
    let target_dims = profile.dims(&config.target_dims)?;
    let draft = profile.resolve_role(&config.draft)?;

    let mut rows = Vec::new();
    for scheme_name in &config.schemes {
        let scheme = profile.scheme(scheme_name)?;
        let taus = TauTable::from_entries(
            config.taus.iter().filter(|t| &t.scheme == scheme_name).map(|t| (t.d, t.n, t.value)),
        )?;
        rows.extend(sweep_tree_size(
            &profile.hardware,
            &[(scheme_name.clone(), scheme)],
            &target_dims,
            &draft,
            ctx_len,
            &config.grid_d,
            &config.grid_n,
            &taus,
        )?);
    }
    Ok(SweepOutput::Grid(rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_csv_has_one_line_per_row_plus_header() {
        let rows = vec![SweepRow {
            scheme: "fp16".into(),
            d: 6,
            n: 30,
            tau: 3.5,
            tv_over_tt: 1.0,
            speedup: 2.9,
        }];
        let text = grid_csv(&rows);
        assert!(text.starts_with("scheme,d,n,tau,"));
        assert!(text.contains("fp16,6,30,3.500000,1.000000,2.900000"));
        assert_eq!(text.lines().count(), 2);
    }
}
