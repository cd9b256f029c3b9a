//! CSV rendering and atomic artifact writes.

use std::io::Write;
use std::path::Path;

use divopt::analysis::Boundaries;
use divopt::grid::Grid;
use divopt::solver::{PolicyField, ValueField};
use tempfile::NamedTempFile;

use crate::CliError;

/// Named file contents, rendered in full before anything touches the disk.
#[derive(Debug, Default, Clone, PartialEq)]
pub struct Artifacts {
    pub files: Vec<(String, String)>,
}

impl Artifacts {
    pub fn add(&mut self, name: impl Into<String>, content: String) {
        self.files.push((name.into(), content));
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.files.iter().find(|f| f.0 == name).map(|f| f.1.as_str())
    }

    /// Writes each file through a temporary in the target directory followed
    /// by a rename, so a reader never sees a partial file.
    pub fn write_to(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|source| CliError::Write { path: dir.to_path_buf(), source })?;
        for (name, content) in &self.files {
            let path = dir.join(name);
            let err = |source| CliError::Write { path: path.clone(), source };
            let mut tmp = NamedTempFile::new_in(dir).map_err(err)?;
            tmp.write_all(content.as_bytes()).map_err(err)?;
            tmp.as_file().sync_all().map_err(err)?;
            tmp.persist(&path).map_err(|e| err(e.error))?;
        }
        Ok(())
    }
}

fn num(v: f64) -> String {
    v.to_string()
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn csv_table<const N: usize>(header: [&str; N], rows: impl IntoIterator<Item = [String; N]>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
}

/// `mu,divLower,divUpper`, plus `issuanceTarget` when targets are present.
/// Absent curve values are empty fields.
pub fn boundaries_csv(b: &Boundaries) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let cols = |j: usize| vec![num(b.mus[j]), opt(b.lower[j]), opt(b.upper[j])];
    match &b.issuance_target {
        Some(t) => {
            w.write_record(["mu", "divLower", "divUpper", "issuanceTarget"]).expect("in-memory write");
            for j in 0..b.mus.len() {
                let mut row = cols(j);
                row.push(opt(t[j]));
                w.write_record(&row).expect("in-memory write");
            }
        }
        None => {
            w.write_record(["mu", "divLower", "divUpper"]).expect("in-memory write");
            for j in 0..b.mus.len() {
                w.write_record(&cols(j)).expect("in-memory write");
            }
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
}

/// One row per node, `x` varying fastest.
pub fn value_csv(grid: &Grid, v: &ValueField, policy: &PolicyField) -> String {
    let (v, l) = (v.values(), policy.rates());
    csv_table(
        ["x", "mu", "V", "ell"],
        (0..grid.len()).map(|n| {
            let (i, j) = grid.coords(n);
            [num(grid.x(i)), num(grid.mu(j)), num(v[n]), num(l[n])]
        }),
    )
}

pub fn json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bounds(target: bool) -> Boundaries {
        Boundaries {
            mus: vec![-1.0, 0.5],
            lower: vec![None, Some(0.0)],
            upper: vec![None, Some(1.25)],
            mu_star: Some(-1.0),
            issuance_target: target.then(|| vec![None, Some(0.75)]),
            issuance_threshold: None,
            x_range: (0.0, 2.0),
            warnings: vec![],
        }
    }

    #[test]
    fn absent_values_are_empty_fields() {
        assert_eq!(boundaries_csv(&bounds(false)), "mu,divLower,divUpper\n-1,,\n0.5,0,1.25\n");
        assert_eq!(boundaries_csv(&bounds(true)), "mu,divLower,divUpper,issuanceTarget\n-1,,,\n0.5,0,1.25,0.75\n");
    }

    #[test]
    fn writes_leave_no_temporaries() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Artifacts::default();
        a.add("a.csv", "x\n1\n".into());
        a.add("b.json", "{}\n".into());
        a.write_to(dir.path()).unwrap();
        a.write_to(dir.path()).unwrap();
        let mut names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
        names.sort();
        assert_eq!(names, ["a.csv", "b.json"]);
        assert_eq!(std::fs::read_to_string(dir.path().join("a.csv")).unwrap(), "x\n1\n");
    }
}
