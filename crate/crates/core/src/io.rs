//! File formats: data tables, posterior draws and R-squared outputs.
//!
//! Every CSV starts with a `#` comment naming the tool version and seed;
//! readers skip such lines. Reals are written with 17 significant digits so
//! that they read back to the same `f64`.

use crate::error::{Error, Result};
use crate::families::Dispersion;
use crate::model::{Dataset, GroupFactor, Model, ModelSpec, ParamDraw};
use crate::rsq::{RsqSummary, SsDecomp};
use crate::sampler::DrawSet;
use nalgebra::DMatrix;
use serde::Serialize;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

pub const TOOL_NAME: &str = "gamm-r2";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// `name version`, recorded in every output file.
pub fn generator() -> String {
    format!("{TOOL_NAME} {TOOL_VERSION}")
}

pub fn header_comment(seed: Option<u64>) -> String {
    match seed {
        Some(s) => format!("# {} seed={s}", generator()),
        None => format!("# {}", generator()),
    }
}

/// Real number with 17 significant digits.
pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

fn csv_reader<R: Read>(r: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(r)
}

/// A CSV file held as strings, with the source line of every row.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub source: String,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub lines: Vec<u64>,
}

impl Table {
    pub fn new(headers: Vec<String>) -> Self {
        Table {
            source: String::new(),
            headers,
            rows: Vec::new(),
            lines: Vec::new(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
        })?;
        Self::from_reader(f, &path.display().to_string())
    }

    pub fn from_reader<R: Read>(r: R, source: &str) -> Result<Self> {
        let mut rdr = csv_reader(r);
        let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut seen = std::collections::HashSet::new();
        for h in &headers {
            if !seen.insert(h) {
                return Err(Error::Schema {
                    path: source.to_string(),
                    line: 1,
                    column: h.clone(),
                    message: "duplicate column".into(),
                });
            }
        }
        let mut t = Table::new(headers);
        t.source = source.to_string();
        for rec in rdr.records() {
            let rec = rec?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != t.headers.len() {
                return Err(Error::Schema {
                    path: source.to_string(),
                    line,
                    column: String::new(),
                    message: format!("expected {} fields, found {}", t.headers.len(), rec.len()),
                });
            }
            t.rows.push(rec.iter().map(str::to_string).collect());
            t.lines.push(line);
        }
        Ok(t)
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn push_row(&mut self, row: Vec<String>) {
        self.lines.push(self.rows.len() as u64 + 2);
        self.rows.push(row);
    }

    fn schema_error(&self, row: usize, column: &str, message: String) -> Error {
        Error::Schema {
            path: self.source.clone(),
            line: self.lines.get(row).copied().unwrap_or(0),
            column: column.to_string(),
            message,
        }
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.headers.iter().position(|h| h == name).ok_or_else(|| Error::Schema {
            path: self.source.clone(),
            line: 1,
            column: name.to_string(),
            message: "missing column".into(),
        })
    }

    pub fn labels(&self, name: &str) -> Result<Vec<String>> {
        let j = self.column_index(name)?;
        Ok(self.rows.iter().map(|r| r[j].clone()).collect())
    }

    /// Finite numeric values of column `name`.
    pub fn numeric(&self, name: &str) -> Result<Vec<f64>> {
        let j = self.column_index(name)?;
        self.rows
            .iter()
            .enumerate()
            .map(|(i, r)| match r[j].parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(self.schema_error(i, name, format!("'{}' is not a finite number", r[j]))),
            })
            .collect()
    }

    pub fn write_to<W: Write>(&self, w: W, comment: &str) -> Result<()> {
        let mut w = w;
        writeln!(w, "{comment}")?;
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(&self.headers)?;
        for r in &self.rows {
            wtr.write_record(r)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn write(&self, path: &Path, comment: &str) -> Result<()> {
        self.write_to(std::fs::File::create(path)?, comment)
    }
}

/// Builds the dataset a model needs from a table, by column name.
pub fn dataset_from_table(spec: &ModelSpec, table: &Table) -> Result<Dataset> {
    let n = table.n_rows();
    let y = table.numeric(&spec.response)?;
    if let Some(i) = y.iter().position(|&v| !spec.family.in_support(v)) {
        return Err(table.schema_error(
            i,
            &spec.response,
            format!("{} is outside the {} support", y[i], spec.family),
        ));
    }
    let mut fixed = DMatrix::zeros(n, spec.fixed.len());
    for (j, name) in spec.fixed.iter().enumerate() {
        fixed.set_column(j, &nalgebra::DVector::from_vec(table.numeric(name)?));
    }
    let groups = spec
        .random
        .iter()
        .map(|name| Ok(GroupFactor::from_labels(&table.labels(name)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut smooth = DMatrix::zeros(n, spec.smooth.len());
    for (j, s) in spec.smooth.iter().enumerate() {
        smooth.set_column(j, &nalgebra::DVector::from_vec(table.numeric(&s.var)?));
    }
    Dataset::new(y, fixed, groups, smooth)
}

pub fn read_model_spec(path: &Path) -> Result<ModelSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    ModelSpec::from_json(&text)
}

/// Column names of the draws file, after `chain` and `iter`.
pub fn draw_columns(model: &Model) -> Vec<String> {
    let spec = model.spec();
    let mut cols: Vec<String> = (0..model.layout().n_beta()).map(|j| format!("beta_{j}")).collect();
    for (name, g) in spec.random.iter().zip(&model.data().groups) {
        cols.extend(g.levels.iter().map(|l| format!("b_{name}_{l}")));
    }
    for s in &spec.smooth {
        cols.extend((1..=s.k).map(|l| format!("gamma_{}_{l}", s.var)));
    }
    cols.extend(spec.random.iter().map(|name| format!("psi_{name}")));
    cols.extend(spec.smooth.iter().map(|s| format!("tau_{}", s.var)));
    if spec.family.has_dispersion() {
        cols.push("phi".into());
    }
    cols
}

fn draw_values(draw: &ParamDraw) -> impl Iterator<Item = f64> + '_ {
    draw.beta
        .iter()
        .chain(&draw.b)
        .chain(&draw.gamma)
        .chain(&draw.psi)
        .chain(&draw.tau)
        .copied()
        .chain(draw.phi.map(Dispersion::value))
}

pub fn write_draws_to<W: Write>(w: W, model: &Model, set: &DrawSet) -> Result<()> {
    let mut w = w;
    writeln!(w, "{}", header_comment(Some(set.seed)))?;
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["chain".to_string(), "iter".to_string()];
    header.extend(draw_columns(model));
    wtr.write_record(&header)?;
    for ((d, c), it) in set.draws.iter().zip(&set.chain_ids).zip(&set.iters) {
        let mut rec = vec![(c + 1).to_string(), (it + 1).to_string()];
        rec.extend(draw_values(d).map(fmt_real));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_draws(path: &Path, model: &Model, set: &DrawSet) -> Result<()> {
    write_draws_to(std::io::BufWriter::new(std::fs::File::create(path)?), model, set)
}

/// Draws read back from a file; chains and iterations are 0-based.
#[derive(Clone, Debug, PartialEq)]
pub struct DrawTable {
    pub draws: Vec<ParamDraw>,
    pub chain_ids: Vec<usize>,
    pub iters: Vec<usize>,
}

/// Reads draws for `model`; columns are matched by name and may appear in
/// any order. `chain` and `iter` are optional.
pub fn read_draws_from<R: Read>(r: R, source: &str, model: &Model) -> Result<DrawTable> {
    let table = Table::from_reader(r, source)?;
    let names = draw_columns(model);
    let pos: HashMap<&str, usize> = table
        .headers
        .iter()
        .enumerate()
        .map(|(i, h)| (h.as_str(), i))
        .collect();
    let idx = names
        .iter()
        .map(|n| table.column_index(n))
        .collect::<Result<Vec<_>>>()?;
    let known: std::collections::HashSet<&str> =
        names.iter().map(String::as_str).chain(["chain", "iter"]).collect();
    if let Some(extra) = table.headers.iter().find(|h| !known.contains(h.as_str())) {
        return Err(Error::Schema {
            path: source.to_string(),
            line: 1,
            column: extra.clone(),
            message: "unexpected column for this model".into(),
        });
    }
    if table.n_rows() == 0 {
        return Err(Error::InvalidData(format!("{source}: no draws")));
    }
    let l = model.layout();
    let sizes = [
        l.n_beta(),
        l.n_b(),
        l.n_gamma(),
        l.factor_levels.len(),
        l.smooth_k.len(),
    ];
    let has_phi = model.family().has_dispersion();
    let int_col = |row: usize, name: &str| -> Result<usize> {
        match pos.get(name) {
            None => Ok(row),
            Some(&j) => match table.rows[row][j].parse::<usize>() {
                Ok(v) if v >= 1 => Ok(v - 1),
                _ => Err(table.schema_error(row, name, "expected a positive integer".into())),
            },
        }
    };
    let mut out = DrawTable {
        draws: Vec::with_capacity(table.n_rows()),
        chain_ids: Vec::with_capacity(table.n_rows()),
        iters: Vec::with_capacity(table.n_rows()),
    };
    for (row, rec) in table.rows.iter().enumerate() {
        let mut vals = Vec::with_capacity(idx.len());
        for (&j, name) in idx.iter().zip(&names) {
            match rec[j].parse::<f64>() {
                Ok(v) if !v.is_nan() => vals.push(v),
                _ => {
                    return Err(table.schema_error(row, name, format!("'{}' is not a number", rec[j])))
                }
            }
        }
        let mut it = vals.into_iter();
        let mut take = |k: usize| -> Vec<f64> { it.by_ref().take(k).collect() };
        let beta = take(sizes[0]);
        let b = take(sizes[1]);
        let gamma = take(sizes[2]);
        let psi = take(sizes[3]);
        let tau = take(sizes[4]);
        let phi = if has_phi {
            let v = take(1)[0];
            Some(Dispersion::new(v).map_err(|e| table.schema_error(row, "phi", e.to_string()))?)
        } else {
            None
        };
        if psi.iter().chain(&tau).any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(table.schema_error(row, "", "scale parameters must be positive".into()));
        }
        out.draws.push(ParamDraw {
            beta,
            b,
            gamma,
            phi,
            psi,
            tau,
        });
        out.chain_ids.push(int_col(row, "chain")?);
        out.iters.push(int_col(row, "iter")?);
    }
    Ok(out)
}

pub fn read_draws(path: &Path, model: &Model) -> Result<DrawTable> {
    let f = std::fs::File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    read_draws_from(std::io::BufReader::new(f), &path.display().to_string(), model)
}

/// Per-draw decomposition rows (`draw_id, ess, rss, tss, r2`); degenerate
/// draws are omitted.
pub fn r2_samples_table(decomps: &[Option<SsDecomp>]) -> Table {
    let mut t = Table::new(["draw_id", "ess", "rss", "tss", "r2"].map(String::from).to_vec());
    for (i, d) in decomps.iter().enumerate() {
        if let Some(d) = d {
            t.push_row(vec![
                (i + 1).to_string(),
                fmt_real(d.ess),
                fmt_real(d.rss),
                fmt_real(d.tss),
                fmt_real(d.r2),
            ]);
        }
    }
    t
}

/// Per-draw values of a single ratio.
pub fn ratio_samples_table(name: &str, summary: &RsqSummary) -> Table {
    let mut t = Table::new(vec!["draw_id".into(), name.into()]);
    for (id, v) in summary.draw_ids.iter().zip(&summary.samples) {
        t.push_row(vec![(id + 1).to_string(), fmt_real(*v)]);
    }
    t
}

pub fn histogram_table(summary: &RsqSummary, bins: usize) -> Table {
    let mut t = Table::new(["bin_lo", "bin_hi", "count"].map(String::from).to_vec());
    for (lo, hi, c) in summary.histogram(bins) {
        t.push_row(vec![fmt_real(lo), fmt_real(hi), c.to_string()]);
    }
    t
}

/// Summary JSON document with the generator and seed recorded as fields.
#[derive(Serialize)]
pub struct SummaryDoc<'a, T: Serialize> {
    pub generator: String,
    pub seed: Option<u64>,
    #[serde(flatten)]
    pub body: &'a T,
}

pub fn write_json<T: Serialize>(path: &Path, seed: Option<u64>, body: &T) -> Result<()> {
    let doc = SummaryDoc {
        generator: generator(),
        seed,
        body,
    };
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::families::Family;
    use crate::model::tests::toy_model;
    use crate::sampler::{sample_posterior, SamplerConfig};

    #[test]
    fn reals_round_trip() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 6.02214076e23, std::f64::consts::PI, 0.0] {
            assert_eq!(fmt_real(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn table_parsing_and_schema_errors() {
        let text = "# comment\ny,x,g\n1,0.5,a\n2,oops,b\n";
        let t = Table::from_reader(text.as_bytes(), "d.csv").unwrap();
        assert_eq!(t.headers, ["y", "x", "g"]);
        assert_eq!(t.numeric("y").unwrap(), vec![1.0, 2.0]);
        match t.numeric("x") {
            Err(Error::Schema { line, column, .. }) => {
                assert_eq!(line, 4);
                assert_eq!(column, "x");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(t.column_index("z"), Err(Error::Schema { .. })));
        let ragged = "y,x\n1,2\n3\n";
        assert!(Table::from_reader(ragged.as_bytes(), "r.csv").is_err());
        let dup = "y,y\n1,2\n";
        assert!(Table::from_reader(dup.as_bytes(), "r.csv").is_err());
    }

    #[test]
    fn dataset_by_column_name() {
        let text = "u,y,x,g\n0.1,3,1.5,b\n0.4,0,2.5,a\n0.9,7,0.5,b\n0.5,1,1.0,a\n";
        let t = Table::from_reader(text.as_bytes(), "d.csv").unwrap();
        let spec = ModelSpec::new(Family::Poisson).with_fixed("x").with_random("g");
        let d = dataset_from_table(&spec, &t).unwrap();
        assert_eq!(d.y, vec![3.0, 0.0, 7.0, 1.0]);
        assert_eq!(d.groups[0].codes, vec![2, 1, 2, 1]);
        let bad = "y,x,g\n-1,1.5,b\n";
        let t = Table::from_reader(bad.as_bytes(), "d.csv").unwrap();
        assert!(matches!(dataset_from_table(&spec, &t), Err(Error::Schema { line: 2, .. })));
    }

    #[test]
    fn draws_round_trip() {
        let model = toy_model(Family::NegativeBinomial);
        let cfg = SamplerConfig {
            chains: 2,
            warmup: 50,
            iters: 20,
            seed: 3,
            ..Default::default()
        };
        let set = sample_posterior(&model, &cfg).unwrap();
        let mut buf = Vec::new();
        write_draws_to(&mut buf, &model, &set).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with(&format!("# {TOOL_NAME} ")));
        let header = text.lines().nth(1).unwrap();
        assert!(header.starts_with("chain,iter,beta_0,beta_1,b_g_a,b_g_b,b_g_c,gamma_u_1,"));
        assert!(header.ends_with(",psi_g,tau_u,phi"));
        let back = read_draws_from(text.as_bytes(), "draws.csv", &model).unwrap();
        assert_eq!(back.draws, set.draws);
        assert_eq!(back.chain_ids, set.chain_ids);
        assert_eq!(back.iters, set.iters);
    }

    #[test]
    fn draws_columns_by_name_and_errors() {
        let model = toy_model(Family::Poisson);
        let cols = draw_columns(&model);
        assert!(!cols.contains(&"phi".to_string()));
        let mut rev = cols.clone();
        rev.reverse();
        let vals: Vec<String> = rev
            .iter()
            .map(|c| if c.starts_with("psi") || c.starts_with("tau") { "1.5" } else { "0.25" }.to_string())
            .collect();
        let text = format!("{}\n{}\n", rev.join(","), vals.join(","));
        let t = read_draws_from(text.as_bytes(), "x.csv", &model).unwrap();
        assert_eq!(t.draws[0].psi, vec![1.5]);
        assert_eq!(t.draws[0].beta, vec![0.25, 0.25]);
        assert_eq!(t.chain_ids, vec![0]);

        let missing = format!("{}\n{}\n", cols[1..].join(","), vals[1..].join(","));
        assert!(matches!(
            read_draws_from(missing.as_bytes(), "x.csv", &model),
            Err(Error::Schema { .. })
        ));
        let extra = format!("{},zzz\n{},1\n", cols.join(","), vals.join(","));
        assert!(read_draws_from(extra.as_bytes(), "x.csv", &model).is_err());
        let negative_scale = format!("{}\n{}\n", rev.join(","), vals.join(",").replace("1.5", "-1"));
        assert!(read_draws_from(negative_scale.as_bytes(), "x.csv", &model).is_err());
    }
}
