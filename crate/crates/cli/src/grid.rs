//! Ablation grids and the results table.

use crate::error::CliError;
use seld_core::metrics::{AggregateScores, SeldScores};
use seld_core::model::ModelConfig;
use std::path::Path;

/// The paper's configuration table: baseline first, then the attention rows.
pub const TABLE1: &str = "\
N,M,P,LN,attn_dims
baseline,-,-,-,-
1,4,No,No,128
1,8,No,No,128
1,12,No,No,128
2,8,No,No,128-128
3,8,No,No,128-128-128
2,8,No,Yes,128-128
3,8,No,Yes,128-128-128
2,12,No,Yes,128-128
3,12,No,Yes,128-128-128
3,8,No,Yes,128-256-128
3,8,No,Yes,128-64-128
2,8,Yes,Yes,128-128
3,8,Yes,Yes,128-128-128
3,8,Yes,Yes,128-256-128
";

pub const RESULTS_HEADER: [&str; 13] = [
    "N",
    "M",
    "P",
    "LN",
    "params",
    "ER20",
    "ER20_std",
    "F20",
    "F20_std",
    "LE_CD",
    "LE_CD_std",
    "LR_CD",
    "LR_CD_std",
];

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub config: ModelConfig,
}

impl GridRow {
    /// The four leading table columns.
    pub fn labels(&self) -> [String; 4] {
        let c = &self.config;
        if c.temporal_module == seld_core::model::TemporalModule::Gru {
            return ["Baseline-CRNN".into(), "-".into(), "-".into(), "-".into()];
        }
        let yn = |b: bool| if b { "Yes" } else { "No" }.to_string();
        let n = if c.attn_dims.iter().all(|&d| d == c.feature_width()) {
            c.n_blocks.to_string()
        } else {
            let dims: Vec<String> = c.attn_dims.iter().map(|d| d.to_string()).collect();
            format!("{} ({})", c.n_blocks, dims.join("-"))
        };
        [
            n,
            c.n_heads.to_string(),
            yn(c.use_pos_emb),
            yn(c.use_ln_residual),
        ]
    }
}

fn parse_bool(s: &str, line: usize) -> Result<bool, CliError> {
    match s.to_ascii_lowercase().as_str() {
        "yes" | "true" | "1" => Ok(true),
        "no" | "false" | "0" => Ok(false),
        _ => Err(CliError::Usage(format!(
            "grid line {line}: expected Yes/No, got {s:?}"
        ))),
    }
}

/// Parses a grid CSV with columns `N,M,P,LN,attn_dims`; a row whose `N` is
/// `baseline` selects the recurrent model.
pub fn parse_grid(text: &str) -> Result<Vec<GridRow>, CliError> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| CliError::Usage(format!("grid: {e}")))?;
        let line = rec.position().map_or(0, |p| p.line()) as usize;
        let bad = |m: String| CliError::Usage(format!("grid line {line}: {m}"));
        if rec.len() != 5 {
            return Err(bad(format!("expected 5 columns, found {}", rec.len())));
        }
        if rec[0].eq_ignore_ascii_case("baseline") {
            rows.push(GridRow {
                config: ModelConfig::baseline(),
            });
            continue;
        }
        let n: usize = rec[0]
            .parse()
            .map_err(|_| bad(format!("N {:?} is not a count", &rec[0])))?;
        let m: usize = rec[1]
            .parse()
            .map_err(|_| bad(format!("M {:?} is not a count", &rec[1])))?;
        let p = parse_bool(&rec[2], line)?;
        let ln = parse_bool(&rec[3], line)?;
        let dims: Vec<usize> = rec[4]
            .split('-')
            .map(|d| {
                d.trim()
                    .parse()
                    .map_err(|_| bad(format!("attn_dims {:?} malformed", &rec[4])))
            })
            .collect::<Result<_, _>>()?;
        if dims.len() != n {
            return Err(bad(format!(
                "{n} blocks but {} attention sizes",
                dims.len()
            )));
        }
        let config = ModelConfig::mhsa(n, m, p, ln).with_attn_dims(dims);
        config.validate().map_err(|e| bad(e.to_string()))?;
        rows.push(GridRow { config });
    }
    if rows.is_empty() {
        return Err(CliError::Usage("grid has no rows".into()));
    }
    Ok(rows)
}

pub fn load_grid(path: &Path) -> Result<Vec<GridRow>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("grid {}: {e}", path.display())))?;
    parse_grid(&text)
}

fn f4(v: f64) -> String {
    format!("{v:.4}")
}

pub fn results_row(row: &GridRow, agg: Option<&AggregateScores>) -> Vec<String> {
    let mut out: Vec<String> = row.labels().into();
    out.push(row.config.param_count().to_string());
    match agg {
        Some(a) => {
            for m in [a.er20, a.f20, a.le_cd, a.lr_cd] {
                out.push(f4(m.mean));
                out.push(f4(m.std));
            }
        }
        None => out.extend(std::iter::repeat(String::new()).take(8)),
    }
    out
}

/// Single-run score row: `config_id, params, ER20, ER20_std, ...` with zero
/// deviations.
pub fn score_row(id: &str, params: usize, s: &SeldScores) -> Vec<String> {
    let mut out = vec![id.to_string(), params.to_string()];
    for v in [s.er20, s.f20, s.le_cd, s.lr_cd] {
        out.push(f4(v));
        out.push(f4(0.0));
    }
    out
}

pub const SCORE_HEADER: [&str; 10] = [
    "config_id",
    "params",
    "ER20",
    "ER20_std",
    "F20",
    "F20_std",
    "LE_CD",
    "LE_CD_std",
    "LR_CD",
    "LR_CD_std",
];

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    w.write_record(header)
        .map_err(|e| CliError::Data(e.to_string()))?;
    for r in rows {
        w.write_record(r)
            .map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table1_grid_parses() {
        let rows = parse_grid(TABLE1).unwrap();
        assert_eq!(rows.len(), 15);
        assert_eq!(rows[0].labels(), ["Baseline-CRNN", "-", "-", "-"]);
        assert_eq!(rows[10].labels(), ["3 (128-256-128)", "8", "No", "Yes"]);
        assert_eq!(rows[12].labels(), ["2", "8", "Yes", "Yes"]);
    }

    #[test]
    fn malformed_rows_are_rejected() {
        assert!(parse_grid("N,M,P,LN,attn_dims\n2,8,No,No,128\n").is_err());
        assert!(parse_grid("N,M,P,LN,attn_dims\n1,8,Maybe,No,128\n").is_err());
        assert!(parse_grid("N,M,P,LN,attn_dims\n1,x,No,No,128\n").is_err());
        assert!(parse_grid("N,M,P,LN,attn_dims\n").is_err());
        assert!(parse_grid("N,M,P,LN,attn_dims\n1,8,No\n").is_err());
    }

    #[test]
    fn params_only_rows_leave_metrics_blank() {
        let rows = parse_grid(TABLE1).unwrap();
        let r = results_row(&rows[2], None);
        assert_eq!(r.len(), RESULTS_HEADER.len());
        assert_eq!(r[4], rows[2].config.param_count().to_string());
        assert!(r[5..].iter().all(String::is_empty));
    }
}
