use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use amkit::numeric::fmt_f64;
use serde::Serialize;

use crate::Failure;

/// Output directory that remembers every file written into it.
pub struct OutDir {
    root: PathBuf,
    written: Vec<String>,
}

pub fn f(x: f64) -> String {
    fmt_f64(x)
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self, Failure> {
        std::fs::create_dir_all(root)
            .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", root.display())))?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Registers a file that a library routine wrote to `path(name)`.
    pub fn record(&mut self, name: &str) {
        self.written.push(name.to_string());
    }

    pub fn written(&self) -> &[String] {
        &self.written
    }

    /// Opens `name` for writing and hands the writer to `body`.
    pub fn write_with<F>(&mut self, name: &str, body: F) -> Result<(), Failure>
    where
        F: FnOnce(&mut BufWriter<File>) -> amkit::Result<()>,
    {
        let path = self.path(name);
        let file = File::create(&path)
            .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        body(&mut w)?;
        w.flush()
            .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))?;
        self.written.push(name.to_string());
        Ok(())
    }

    /// Header line followed by one line per row; an empty `rows` still
    /// produces the header.
    pub fn csv(
        &mut self,
        name: &str,
        header: &[&str],
        rows: &[Vec<String>],
    ) -> Result<(), Failure> {
        self.write_with(name, |w| {
            writeln!(w, "{}", header.join(","))?;
            for r in rows {
                debug_assert_eq!(r.len(), header.len());
                writeln!(w, "{}", r.join(","))?;
            }
            Ok(())
        })
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Failure> {
        let text =
            serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
        self.write_with(name, |w| {
            writeln!(w, "{text}")?;
            Ok(())
        })
    }

    pub fn text(&mut self, name: &str, text: &str) -> Result<(), Failure> {
        self.write_with(name, |w| {
            w.write_all(text.as_bytes())?;
            Ok(())
        })
    }
}
