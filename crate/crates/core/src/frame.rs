//! Column store for model covariates and treatment-coded design matrices.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formula::{Atom, Effects, RandomTerm};

#[derive(Debug, Clone)]
pub enum Column {
    Factor { levels: Vec<String>, codes: Vec<u32> },
    Numeric(Vec<f64>),
}

/// Orders integers numerically and everything else lexicographically.
pub fn natural_cmp(a: &str, b: &str) -> std::cmp::Ordering {
    match (a.parse::<i64>(), b.parse::<i64>()) {
        (Ok(x), Ok(y)) => x.cmp(&y),
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        _ => a.cmp(b),
    }
}

#[derive(Debug, Clone, Default)]
pub struct ModelData {
    n: usize,
    columns: BTreeMap<String, Column>,
}

impl ModelData {
    pub fn new(n: usize) -> Self {
        Self { n, columns: BTreeMap::new() }
    }

    pub fn n_rows(&self) -> usize {
        self.n
    }

    fn check_len(&self, name: &str, len: usize) -> Result<()> {
        if len != self.n {
            return Err(Error::Schema(format!("column `{name}` has {len} rows, expected {}", self.n)));
        }
        Ok(())
    }

    /// Adds a factor whose levels are the sorted distinct values.
    pub fn add_factor<S: AsRef<str>>(&mut self, name: &str, values: &[S]) -> Result<()> {
        let mut levels: Vec<String> = values.iter().map(|v| v.as_ref().to_string()).collect();
        levels.sort_by(|a, b| natural_cmp(a, b));
        levels.dedup();
        self.add_factor_with_levels(name, values, levels)
    }

    /// Adds a factor with an explicit level order (first level is the baseline).
    /// Levels without observations are dropped.
    pub fn add_factor_with_levels<S: AsRef<str>>(
        &mut self,
        name: &str,
        values: &[S],
        levels: Vec<String>,
    ) -> Result<()> {
        self.check_len(name, values.len())?;
        let mut used = vec![false; levels.len()];
        let index: HashMap<&str, usize> = levels.iter().enumerate().map(|(i, l)| (l.as_str(), i)).collect();
        let mut raw = Vec::with_capacity(values.len());
        for v in values {
            let i = *index.get(v.as_ref()).ok_or_else(|| Error::UnseenLevel {
                factor: name.to_string(),
                level: v.as_ref().to_string(),
            })?;
            used[i] = true;
            raw.push(i);
        }
        let mut remap = vec![u32::MAX; levels.len()];
        let mut kept = Vec::new();
        for (i, l) in levels.into_iter().enumerate() {
            if used[i] {
                remap[i] = kept.len() as u32;
                kept.push(l);
            }
        }
        let codes = raw.into_iter().map(|i| remap[i]).collect();
        self.columns.insert(name.to_string(), Column::Factor { levels: kept, codes });
        Ok(())
    }

    pub fn add_numeric(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        self.check_len(name, values.len())?;
        self.columns.insert(name.to_string(), Column::Numeric(values));
        Ok(())
    }

    pub fn column(&self, name: &str) -> Result<&Column> {
        self.columns
            .get(name)
            .ok_or_else(|| Error::Schema(format!("model data has no column `{name}`")))
    }

    pub fn factor(&self, name: &str) -> Result<(&[String], &[u32])> {
        match self.column(name)? {
            Column::Factor { levels, codes } => Ok((levels, codes)),
            Column::Numeric(_) => Err(Error::Schema(format!("column `{name}` is numeric, expected a factor"))),
        }
    }

    pub fn numeric(&self, name: &str) -> Result<&[f64]> {
        match self.column(name)? {
            Column::Numeric(v) => Ok(v),
            Column::Factor { .. } => Err(Error::Schema(format!("column `{name}` is a factor, expected numeric"))),
        }
    }

    pub fn is_factor(&self, name: &str) -> Result<bool> {
        Ok(matches!(self.column(name)?, Column::Factor { .. }))
    }

    /// String value of a factor cell.
    pub fn level_of(&self, name: &str, row: usize) -> Result<&str> {
        let (levels, codes) = self.factor(name)?;
        Ok(&levels[codes[row] as usize])
    }

    /// Row subset; factor level lists are re-derived from the kept rows.
    pub fn select(&self, rows: &[usize]) -> Result<ModelData> {
        let mut out = ModelData::new(rows.len());
        for (name, col) in &self.columns {
            match col {
                Column::Numeric(v) => out.add_numeric(name, rows.iter().map(|&r| v[r]).collect())?,
                Column::Factor { levels, codes } => {
                    let vals: Vec<&str> = rows.iter().map(|&r| levels[codes[r] as usize].as_str()).collect();
                    out.add_factor_with_levels(name, &vals, levels.clone())?;
                }
            }
        }
        Ok(out)
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.keys().map(String::as_str)
    }
}

/// One factor of a design column: an indicator or a numeric covariate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Component {
    Level { factor: String, level: String },
    Numeric { column: String, log: bool },
}

/// A design column as a product of components; empty is the intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnSpec(pub Vec<Component>);

impl ColumnSpec {
    pub fn name(&self) -> String {
        if self.0.is_empty() {
            return "(Intercept)".into();
        }
        self.0
            .iter()
            .map(|c| match c {
                Component::Level { factor, level } => format!("{factor}={level}"),
                Component::Numeric { column, log: true } => format!("log({column})"),
                Component::Numeric { column, log: false } => column.clone(),
            })
            .collect::<Vec<_>>()
            .join(":")
    }

    /// Evaluates the column on every row of `data`.
    pub fn evaluate(&self, data: &ModelData) -> Result<Vec<f64>> {
        let mut out = vec![1.0; data.n_rows()];
        for comp in &self.0 {
            match comp {
                Component::Level { factor, level } => {
                    let (levels, codes) = data.factor(factor)?;
                    match levels.iter().position(|l| l == level) {
                        Some(target) => {
                            for (o, &c) in out.iter_mut().zip(codes) {
                                if c as usize != target {
                                    *o = 0.0;
                                }
                            }
                        }
                        None => out.iter_mut().for_each(|o| *o = 0.0),
                    }
                }
                Component::Numeric { column, log } => {
                    let vals = data.numeric(column)?;
                    for (o, &v) in out.iter_mut().zip(vals) {
                        let x = if *log {
                            if v <= 0.0 {
                                return Err(Error::Domain(format!("log of nonpositive `{column}` value {v}")));
                            }
                            v.ln()
                        } else {
                            v
                        };
                        *o *= x;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Treatment-coded columns for `effects`. A factor inside a term is coded by
/// contrasts (baseline dropped) when the term without that factor is also in
/// the model, and by full indicators otherwise.
pub fn coding_columns(effects: &Effects, data: &ModelData) -> Result<Vec<ColumnSpec>> {
    let mut specs = Vec::new();
    if effects.intercept {
        specs.push(ColumnSpec(Vec::new()));
    }
    for term in &effects.terms {
        let mut combos: Vec<Vec<Component>> = vec![Vec::new()];
        for (i, atom) in term.0.iter().enumerate() {
            let options: Vec<Component> = match atom {
                Atom::Log(c) => {
                    data.numeric(c)?;
                    vec![Component::Numeric { column: c.clone(), log: true }]
                }
                Atom::Var(c) => {
                    if data.is_factor(c)? {
                        let (levels, _) = data.factor(c)?;
                        let skip = usize::from(effects.contains(&term.without(i)));
                        levels
                            .iter()
                            .skip(skip)
                            .map(|l| Component::Level { factor: c.clone(), level: l.clone() })
                            .collect()
                    } else {
                        vec![Component::Numeric { column: c.clone(), log: false }]
                    }
                }
            };
            combos = combos
                .into_iter()
                .flat_map(|prefix| {
                    options.iter().map(move |o| {
                        let mut v = prefix.clone();
                        v.push(o.clone());
                        v
                    })
                })
                .collect();
        }
        specs.extend(combos.into_iter().map(ColumnSpec));
    }
    Ok(specs)
}

/// Dense row-major design matrix.
#[derive(Debug, Clone)]
pub struct Design {
    pub n: usize,
    pub p: usize,
    pub x: Vec<f64>,
    pub specs: Vec<ColumnSpec>,
}

impl Design {
    pub fn build(specs: Vec<ColumnSpec>, data: &ModelData) -> Result<Self> {
        let n = data.n_rows();
        let p = specs.len();
        let mut x = vec![0.0; n * p];
        for (j, s) in specs.iter().enumerate() {
            let col = s.evaluate(data)?;
            for (i, v) in col.into_iter().enumerate() {
                x[i * p + j] = v;
            }
        }
        Ok(Self { n, p, x, specs })
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn names(&self) -> Vec<String> {
        self.specs.iter().map(ColumnSpec::name).collect()
    }

    /// Drops columns that are linear combinations of earlier ones and returns
    /// the names of the dropped columns.
    pub fn drop_aliased(&mut self) -> Vec<String> {
        let p = self.p;
        let mut gram = vec![0.0; p * p];
        for i in 0..self.n {
            let r = self.row(i);
            for a in 0..p {
                if r[a] == 0.0 {
                    continue;
                }
                for b in a..p {
                    gram[a * p + b] += r[a] * r[b];
                }
            }
        }
        // Incremental Cholesky over kept columns.
        let mut kept: Vec<usize> = Vec::new();
        let mut chol: Vec<Vec<f64>> = Vec::new();
        let g = |a: usize, b: usize| if a <= b { gram[a * p + b] } else { gram[b * p + a] };
        for j in 0..p {
            let gjj = g(j, j);
            if gjj <= 0.0 {
                continue;
            }
            let mut row = Vec::with_capacity(kept.len() + 1);
            for (m, &k) in kept.iter().enumerate() {
                let mut s = g(k, j);
                for q in 0..m {
                    s -= chol[m][q] * row[q];
                }
                row.push(s / chol[m][m]);
            }
            let d = gjj - row.iter().map(|v| v * v).sum::<f64>();
            if d <= 1e-9 * gjj {
                continue;
            }
            row.push(d.sqrt());
            chol.push(row);
            kept.push(j);
        }
        if kept.len() == p {
            return Vec::new();
        }
        let dropped: Vec<String> =
            (0..p).filter(|j| !kept.contains(j)).map(|j| self.specs[j].name()).collect();
        let mut x = Vec::with_capacity(self.n * kept.len());
        for i in 0..self.n {
            let r = self.row(i);
            x.extend(kept.iter().map(|&j| r[j]));
        }
        self.specs = kept.iter().map(|&j| self.specs[j].clone()).collect();
        self.p = kept.len();
        self.x = x;
        dropped
    }
}

/// Composite level key of a grouping factor interaction for one row.
pub fn group_key(data: &ModelData, group: &[String], row: usize) -> Result<String> {
    let parts = group
        .iter()
        .map(|g| data.level_of(g, row).map(str::to_string))
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.join(":"))
}

/// Design of one random-effect term.
#[derive(Debug, Clone)]
pub struct RandomBlock {
    pub term: RandomTerm,
    pub specs: Vec<ColumnSpec>,
    pub levels: Vec<String>,
    pub codes: Vec<u32>,
    /// Row-major `n x k` random-effect design.
    pub z: Vec<f64>,
    pub k: usize,
}

impl RandomBlock {
    pub fn build(term: &RandomTerm, data: &ModelData) -> Result<Self> {
        let specs = coding_columns(&term.effects, data)?;
        if specs.is_empty() {
            return Err(Error::Formula(format!("random term {term} has no columns")));
        }
        let d = Design::build(specs, data)?;
        let n = data.n_rows();
        // Sort level keys by the natural order of their component codes.
        let factor_codes = term
            .group
            .iter()
            .map(|g| data.factor(g).map(|(_, c)| c))
            .collect::<Result<Vec<_>>>()?;
        let mut key_rows: BTreeMap<Vec<u32>, u32> = BTreeMap::new();
        for i in 0..n {
            let key: Vec<u32> = factor_codes.iter().map(|c| c[i]).collect();
            let len = key_rows.len() as u32;
            key_rows.entry(key).or_insert(len);
        }
        let mut ordered: Vec<(Vec<u32>, u32)> = key_rows.into_iter().collect();
        ordered.sort();
        let mut first_row: HashMap<Vec<u32>, u32> = HashMap::new();
        let mut levels = Vec::with_capacity(ordered.len());
        for (rank, (key, _)) in ordered.iter().enumerate() {
            first_row.insert(key.clone(), rank as u32);
            let parts: Vec<String> = key
                .iter()
                .zip(&term.group)
                .map(|(&c, g)| data.factor(g).map(|(lv, _)| lv[c as usize].clone()))
                .collect::<Result<_>>()?;
            levels.push(parts.join(":"));
        }
        if levels.len() < 2 {
            return Err(Error::InsufficientData(format!(
                "grouping factor `{}` needs at least 2 levels, found {}",
                term.group_name(),
                levels.len()
            )));
        }
        let codes = (0..n)
            .map(|i| {
                let key: Vec<u32> = factor_codes.iter().map(|c| c[i]).collect();
                first_row[&key]
            })
            .collect();
        Ok(Self { term: term.clone(), k: d.p, specs: d.specs, levels, codes, z: d.x })
    }

    pub fn coef_names(&self) -> Vec<String> {
        self.specs.iter().map(ColumnSpec::name).collect()
    }
}
