use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use viconex_autodiff::Tensor;

use crate::error::{Error, Result};

/// Where the raw concept embeddings came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    File(String),
    Synthetic { seed: u64 },
}

/// Raw per-concept text embeddings `E_c` (`C × D_k`), unit rows not
/// required.
#[derive(Debug, Clone, PartialEq)]
pub struct TextConceptBank {
    pub descriptions: Vec<String>,
    pub provenance: Provenance,
    embeddings: Tensor<f64>,
}

impl TextConceptBank {
    pub fn new(descriptions: Vec<String>, provenance: Provenance, embeddings: Tensor<f64>) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.shape()[0] != descriptions.len() {
            return Err(Error::TextBank(format!(
                "embedding shape {:?} does not match {} descriptions",
                embeddings.shape(),
                descriptions.len()
            )));
        }
        Ok(Self {
            descriptions,
            provenance,
            embeddings,
        })
    }

    /// Orthonormal pseudo-embeddings from seeded Gaussian rows.
    pub fn synthetic(descriptions: Vec<String>, text_dim: usize, seed: u64) -> Result<Self> {
        let c = descriptions.len();
        if c > text_dim {
            return Err(Error::TextBank(format!(
                "cannot orthogonalize {c} rows in dimension {text_dim}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(c);
        while rows.len() < c {
            let mut v: Vec<f64> = (0..text_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            for r in &rows {
                let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-8 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= n);
            rows.push(v);
        }
        let data: Vec<f64> = rows.into_iter().flatten().collect();
        Self::new(descriptions, Provenance::Synthetic { seed }, Tensor::new(&[c, text_dim], data)?)
    }

    /// Parses the `C D_k` header followed by `C` rows of floats.
    pub fn parse(descriptions: Vec<String>, text: &str, text_dim: usize, origin: &str) -> Result<Self> {
        let c = descriptions.len();
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let header = lines
            .next()
            .ok_or_else(|| Error::TextBank(format!("{origin}: empty file")))?;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::TextBank(format!("{origin}: bad header {header:?}")))?;
        let [rows, dk] = dims[..] else {
            return Err(Error::TextBank(format!("{origin}: header must be `C D_k`")));
        };
        if dk != text_dim {
            return Err(Error::TextBank(format!(
                "{origin}: embedding dimension {dk} does not match configured {text_dim}"
            )));
        }
        let mut data = Vec::with_capacity(c * dk);
        let mut count = 0;
        for (i, line) in lines.enumerate() {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::TextBank(format!("{origin}: row {i} is not numeric")))?;
            if vals.len() != dk {
                return Err(Error::TextBank(format!(
                    "{origin}: row {i} has {} values, expected {dk}",
                    vals.len()
                )));
            }
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::TextBank(format!("{origin}: row {i} is not finite")));
            }
            data.extend(vals);
            count += 1;
        }
        if count != rows || rows != c {
            return Err(Error::TextBank(format!(
                "{origin}: {count} rows (header says {rows}) but {c} concepts are configured"
            )));
        }
        Self::new(descriptions, Provenance::File(origin.to_string()), Tensor::new(&[c, dk], data)?)
    }

    pub fn load(descriptions: Vec<String>, path: &Path, text_dim: usize) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(descriptions, &text, text_dim, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        let (c, dk) = (self.concepts(), self.text_dim());
        let mut s = format!("{c} {dk}\n");
        for row in self.embeddings.data().chunks(dk) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn concepts(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn text_dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn embeddings(&self) -> &Tensor<f64> {
        &self.embeddings
    }

    /// `T_tc = E_c · W_p` for `W_p` of shape `[D_k, D]`.
    pub fn project(&self, w_p: &Tensor<f64>) -> Result<Tensor<f64>> {
        let (c, dk) = (self.concepts(), self.text_dim());
        if w_p.rank() != 2 || w_p.shape()[0] != dk {
            return Err(Error::TextBank(format!(
                "projection shape {:?} does not accept dimension {dk}",
                w_p.shape()
            )));
        }
        let d = w_p.shape()[1];
        let (e, w) = (self.embeddings.data(), w_p.data());
        let mut out = vec![0.0; c * d];
        for i in 0..c {
            for k in 0..dk {
                let a = e[i * dk + k];
                if a == 0.0 {
                    continue;
                }
                for j in 0..d {
                    out[i * d + j] += a * w[k * d + j];
                }
            }
        }
        Ok(Tensor::new(&[c, d], out)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn names(c: usize) -> Vec<String> {
        (0..c).map(|i| format!("concept {i}")).collect()
    }

    #[test]
    fn synthetic_rows_are_orthonormal() {
        let b = TextConceptBank::synthetic(names(6), 1024, 7).unwrap();
        let e = b.embeddings().data();
        for i in 0..6 {
            for j in 0..6 {
                let d: f64 = (0..1024).map(|k| e[i * 1024 + k] * e[j * 1024 + k]).sum();
                if i == j {
                    assert!((d - 1.0).abs() < 1e-12);
                } else {
                    assert!(d.abs() < 0.1);
                }
            }
        }
    }

    #[test]
    fn file_round_trip() {
        let b = TextConceptBank::synthetic(names(3), 5, 1).unwrap();
        let back = TextConceptBank::parse(names(3), &b.to_text(), 5, "mem").unwrap();
        assert_eq!(back.embeddings(), b.embeddings());
    }

    #[test]
    fn wrong_row_count_and_dimension_rejected() {
        let text = "5 2\n1 0\n0 1\n1 1\n2 2\n3 3\n";
        assert!(matches!(
            TextConceptBank::parse(names(6), text, 2, "x"),
            Err(Error::TextBank(_))
        ));
        let text = "2 3\n1 0 0\n0 1 0\n";
        assert!(TextConceptBank::parse(names(2), text, 2, "x").is_err());
        let text = "2 2\n1 0\n0 1 5\n";
        assert!(TextConceptBank::parse(names(2), text, 2, "x").is_err());
    }

    #[test]
    fn identity_projection_reproduces_embeddings() {
        let b = TextConceptBank::synthetic(names(4), 8, 3).unwrap();
        let mut w = vec![0.0; 64];
        for i in 0..8 {
            w[i * 8 + i] = 1.0;
        }
        let t = b.project(&Tensor::new(&[8, 8], w).unwrap()).unwrap();
        assert_eq!(t.data(), b.embeddings().data());
    }
}
