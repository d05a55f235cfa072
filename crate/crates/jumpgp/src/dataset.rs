//! Training data container and its CSV exchange format.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};

/// Input matrix (row-major, N x d), response vector and per-dimension
/// domain bounds.
#[derive(Debug, Clone)]
pub struct Dataset {
    xs: Vec<f64>,
    ys: Vec<f64>,
    dim: usize,
    domain: Vec<(f64, f64)>,
}

impl Dataset {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>, domain: Vec<(f64, f64)>) -> Result<Self> {
        let d = domain.len();
        if d == 0 {
            return Err(Error::argument("dataset needs at least one dimension".to_string()));
        }
        if xs.len() != ys.len() * d {
            return Err(Error::argument(format!(
                "input buffer has {} values, expected {} x {}",
                xs.len(),
                ys.len(),
                d
            )));
        }
        if ys.is_empty() {
            return Err(Error::argument("dataset needs at least one point".to_string()));
        }
        let ds = Dataset { xs, ys, dim: d, domain };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.xs.iter().chain(self.ys.iter()).any(|v| !v.is_finite()) {
            return Err(Error::argument("dataset contains NaN or Inf".to_string()));
        }
        for i in 0..self.len() {
            for (k, &(lo, hi)) in self.domain.iter().enumerate() {
                let v = self.point(i)[k];
                if v < lo - 1e-12 || v > hi + 1e-12 {
                    return Err(Error::argument(format!(
                        "point {i} coordinate {k} = {v} outside domain [{lo}, {hi}]"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn domain(&self) -> &[(f64, f64)] {
        &self.domain
    }

    /// Euclidean length of the domain diagonal.
    pub fn domain_diagonal(&self) -> f64 {
        self.domain
            .iter()
            .map(|(lo, hi)| (hi - lo) * (hi - lo))
            .sum::<f64>()
            .sqrt()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.xs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn response(&self, i: usize) -> f64 {
        self.ys[i]
    }

    pub fn responses(&self) -> &[f64] {
        &self.ys
    }

    pub fn points_flat(&self) -> &[f64] {
        &self.xs
    }

    /// Gather a subset of rows into a fresh flat buffer + response vector.
    pub fn gather(&self, idx: &[usize]) -> (Vec<f64>, DVector<f64>) {
        let mut xs = Vec::with_capacity(idx.len() * self.dim);
        let mut ys = Vec::with_capacity(idx.len());
        for &i in idx {
            xs.extend_from_slice(self.point(i));
            ys.push(self.ys[i]);
        }
        (xs, DVector::from_vec(ys))
    }

    pub fn push(&mut self, x: &[f64], y: f64) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::argument(format!(
                "push: point has dimension {}, dataset has {}",
                x.len(),
                self.dim
            )));
        }
        if x.iter().any(|v| !v.is_finite()) || !y.is_finite() {
            return Err(Error::argument("push: non-finite value".to_string()));
        }
        self.xs.extend_from_slice(x);
        self.ys.push(y);
        Ok(())
    }

    pub fn response_variance(&self) -> f64 {
        let n = self.len() as f64;
        let mean = self.ys.iter().sum::<f64>() / n;
        self.ys.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n
    }

    pub fn y_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.ys)
    }

    /// Write `x1..xd,y[,region]` with a header row.
    pub fn write_csv<W: Write>(&self, w: W, regions: Option<&[usize]>) -> Result<()> {
        let mut w = BufWriter::new(w);
        let mut header: Vec<String> = (1..=self.dim).map(|k| format!("x{k}")).collect();
        header.push("y".to_string());
        if regions.is_some() {
            header.push("region".to_string());
        }
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.len() {
            let mut fields: Vec<String> = self.point(i).iter().map(|v| fmt_g17(*v)).collect();
            fields.push(fmt_g17(self.ys[i]));
            if let Some(r) = regions {
                fields.push(r[i].to_string());
            }
            writeln!(w, "{}", fields.join(","))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path, regions: Option<&[usize]>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(f, regions)
    }

    /// Read the CSV format written by [`Dataset::write_csv`].
    ///
    /// The domain is inferred as the per-column bounding box. Returns the
    /// dataset plus the region column when present.
    pub fn read_csv<R: BufRead>(r: R) -> Result<(Self, Option<Vec<usize>>)> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Csv("empty file".to_string()))??;
        let cols: Vec<&str> = header.trim().split(',').collect();
        let has_region = cols.last() == Some(&"region");
        let d = cols.len() - 1 - usize::from(has_region);
        if d == 0 {
            return Err(Error::Csv("no input columns".to_string()));
        }
        for (k, c) in cols.iter().take(d).enumerate() {
            let expect = format!("x{}", k + 1);
            if *c != expect {
                return Err(Error::Csv(format!("expected column '{expect}', found '{c}'")));
            }
        }
        if cols[d] != "y" {
            return Err(Error::Csv(format!("expected column 'y', found '{}'", cols[d])));
        }
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        let mut regions = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.trim().split(',').collect();
            if fields.len() != cols.len() {
                return Err(Error::Csv(format!(
                    "row {}: expected {} fields, found {}",
                    lineno + 2,
                    cols.len(),
                    fields.len()
                )));
            }
            for f in fields.iter().take(d) {
                xs.push(parse_f64(f, lineno + 2)?);
            }
            ys.push(parse_f64(fields[d], lineno + 2)?);
            if has_region {
                regions.push(fields[d + 1].parse::<usize>().map_err(|_| {
                    Error::Csv(format!("row {}: bad region '{}'", lineno + 2, fields[d + 1]))
                })?);
            }
        }
        if ys.is_empty() {
            return Err(Error::Csv("no data rows".to_string()));
        }
        let n = ys.len();
        let mut domain = vec![(f64::INFINITY, f64::NEG_INFINITY); d];
        for i in 0..n {
            for k in 0..d {
                let v = xs[i * d + k];
                domain[k].0 = domain[k].0.min(v);
                domain[k].1 = domain[k].1.max(v);
            }
        }
        let ds = Dataset::new(xs, ys, domain)?;
        Ok((ds, if has_region { Some(regions) } else { None }))
    }

    pub fn load_csv(path: &Path) -> Result<(Self, Option<Vec<usize>>)> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}

fn parse_f64(s: &str, lineno: usize) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::Csv(format!("row {lineno}: bad number '{s}'")))
}

/// Serialize with 17 significant digits, enough to round-trip any f64.
pub fn fmt_g17(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Dataset {
        Dataset::new(
            vec![0.0, 0.0, 0.5, -0.25, -0.5, 0.5],
            vec![1.0, 2.0, 3.0],
            vec![(-0.5, 0.5), (-0.5, 0.5)],
        )
        .unwrap()
    }

    #[test]
    fn accessors() {
        let d = toy();
        assert_eq!(d.len(), 3);
        assert_eq!(d.dim(), 2);
        assert_eq!(d.point(1), &[0.5, -0.25]);
        assert_eq!(d.response(2), 3.0);
    }

    #[test]
    fn rejects_nan() {
        let r = Dataset::new(vec![f64::NAN], vec![1.0], vec![(0.0, 1.0)]);
        assert!(r.is_err());
    }

    #[test]
    fn rejects_out_of_domain() {
        let r = Dataset::new(vec![2.0], vec![1.0], vec![(0.0, 1.0)]);
        assert!(r.is_err());
    }

    #[test]
    fn csv_round_trip() {
        let d = toy();
        let mut buf = Vec::new();
        d.write_csv(&mut buf, Some(&[0, 1, 0])).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("x1,x2,y,region\n"));
        let (back, regions) = Dataset::read_csv(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(regions, Some(vec![0, 1, 0]));
        for i in 0..3 {
            assert_eq!(back.point(i), d.point(i));
            assert_eq!(back.response(i), d.response(i));
        }
    }

    #[test]
    fn csv_rejects_bad_header() {
        let src = "a,b,y\n0,0,1\n";
        assert!(Dataset::read_csv(std::io::Cursor::new(src)).is_err());
    }

    #[test]
    fn g17_round_trips() {
        for v in [0.1, -1.0 / 3.0, 1e-300, 123456.789, std::f64::consts::PI] {
            let s = fmt_g17(v);
            assert_eq!(s.parse::<f64>().unwrap(), v, "{s}");
        }
    }
}
