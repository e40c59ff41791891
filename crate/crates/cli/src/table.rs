//! CSV tables with `# key = value` metadata and the embedded config in the
//! header comments.

use std::error::Error;
use std::fs;
use std::path::Path;

pub struct Table {
    pub meta: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self { meta: Vec::new(), columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn meta(&mut self, key: &str, value: impl ToString) {
        self.meta.push((key.into(), value.to_string()));
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn render(&self, embedded_config: &str) -> Result<String, Box<dyn Error>> {
        let mut out = String::new();
        for (k, v) in &self.meta {
            out.push_str(&format!("# {k} = {v}\n"));
        }
        out.push_str(embedded_config);
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        out.push_str(std::str::from_utf8(&w.into_inner()?)?);
        Ok(out)
    }

    pub fn write(&self, path: &Path, embedded_config: &str) -> Result<(), Box<dyn Error>> {
        fs::write(path, self.render(embedded_config)?).map_err(|e| format!("{}: {e}", path.display()).into())
    }

    pub fn read(path: &Path) -> Result<Self, Box<dyn Error>> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let meta = text
            .lines()
            .filter_map(|l| l.strip_prefix("# ")?.split_once(" = "))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let columns = r.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .map(|f| f.parse::<f64>().map_err(|_| format!("{}: non-numeric field '{f}'", path.display())))
                .collect::<Result<Vec<f64>, _>>()?;
            rows.push(row);
        }
        Ok(Self { meta, columns, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let k = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[k]).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_and_read_back() {
        let mut t = Table::new(&["t", "re"]);
        t.meta("observable", "mz");
        t.push(vec![0.0, -0.5]);
        t.push(vec![0.1, 0.125]);
        let dir = std::env::temp_dir().join(format!("spinsde-table-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.csv");
        t.write(&path, "#| [lattice]\n").unwrap();
        let back = Table::read(&path).unwrap();
        assert_eq!(back.columns, vec!["t", "re"]);
        assert_eq!(back.rows, t.rows);
        assert_eq!(back.meta, vec![("observable".to_string(), "mz".to_string())]);
        fs::remove_dir_all(dir).unwrap();
    }
}
