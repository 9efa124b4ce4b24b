//! File formats: Matrix Market coordinate integer for counts, CSV for
//! matrices/vectors/bias tables, a JSON manifest for saved models.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::bias::BiasEstimate;
use crate::error::{Error, Result};
use crate::model::{CountMatrix, GroundTruthModel};

pub fn write_matrix_market(path: &Path, z: &CountMatrix) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let (m, n) = z.dims();
    writeln!(w, "%%MatrixMarket matrix coordinate integer general")?;
    writeln!(w, "{m} {n} {}", z.nnz())?;
    for (i, j, v) in z.iter() {
        writeln!(w, "{} {} {v}", i + 1, j + 1)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_market(path: &Path) -> Result<CountMatrix> {
    let f = BufReader::new(File::open(path)?);
    let mut lines = f.lines().enumerate();
    let (lno, header) = lines
        .next()
        .ok_or(Error::Parse { line: 1, msg: "empty file".into() })?;
    let header = header?;
    let h: Vec<&str> = header.split_whitespace().collect();
    if h.len() < 4
        || h[0] != "%%MatrixMarket"
        || h[1] != "matrix"
        || h[2] != "coordinate"
        || h[3] != "integer"
    {
        return Err(Error::Parse {
            line: lno + 1,
            msg: format!("expected '%%MatrixMarket matrix coordinate integer', got '{header}'"),
        });
    }
    let mut dims: Option<(usize, usize, usize)> = None;
    let mut triplets: Vec<(u32, u32, u64)> = Vec::new();
    for (lno, line) in lines {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('%') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        match dims {
            None => {
                if parts.len() != 3 {
                    return Err(Error::Parse {
                        line: lno + 1,
                        msg: "size line needs 'm n nnz'".into(),
                    });
                }
                let m = parse_usize(parts[0], lno + 1)?;
                let n = parse_usize(parts[1], lno + 1)?;
                let nnz = parse_usize(parts[2], lno + 1)?;
                dims = Some((m, n, nnz));
                triplets.reserve(nnz);
            }
            Some((m, n, _)) => {
                if parts.len() != 3 {
                    return Err(Error::Parse {
                        line: lno + 1,
                        msg: "entry needs 'i j value'".into(),
                    });
                }
                let i = parse_usize(parts[0], lno + 1)?;
                let j = parse_usize(parts[1], lno + 1)?;
                let v: i128 = parts[2].parse().map_err(|_| Error::Parse {
                    line: lno + 1,
                    msg: format!("bad count '{}'", parts[2]),
                })?;
                if v < 0 {
                    return Err(Error::InvalidParameter(format!(
                        "negative count {v} at line {}",
                        lno + 1
                    )));
                }
                if i == 0 || j == 0 || i > m || j > n {
                    return Err(Error::Parse {
                        line: lno + 1,
                        msg: format!("index ({i}, {j}) outside 1..{m} × 1..{n}"),
                    });
                }
                triplets.push(((i - 1) as u32, (j - 1) as u32, v as u64));
            }
        }
    }
    let (m, n, nnz) = dims.ok_or(Error::Parse { line: 2, msg: "missing size line".into() })?;
    if triplets.len() != nnz {
        return Err(Error::Parse {
            line: 0,
            msg: format!("expected {nnz} entries, found {}", triplets.len()),
        });
    }
    CountMatrix::from_triplets(m, n, triplets)
}

fn parse_usize(s: &str, line: usize) -> Result<usize> {
    s.parse()
        .map_err(|_| Error::Parse { line, msg: format!("bad integer '{s}'") })
}

/// Shortest-round-trip float formatting (Rust's default float Display).
pub fn write_matrix_csv(path: &Path, x: &Array2<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in x.outer_iter() {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    let f = BufReader::new(File::open(path)?);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lno, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|s| {
                s.trim().parse::<f64>().map_err(|_| Error::Parse {
                    line: lno + 1,
                    msg: format!("bad float '{s}'"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    line: lno + 1,
                    msg: "ragged rows".into(),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse { line: 1, msg: "empty csv".into() });
    }
    let ncols = rows[0].len();
    let flat: Vec<f64> = rows.concat();
    Array2::from_shape_vec((flat.len() / ncols, ncols), flat)
        .map_err(|e| Error::Parse { line: 0, msg: e.to_string() })
}

pub fn write_vector_csv(path: &Path, x: &Array1<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in x.iter() {
        writeln!(w, "{v}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_vector_csv(path: &Path) -> Result<Array1<f64>> {
    let m = read_matrix_csv(path)?;
    if m.ncols() != 1 {
        return Err(Error::Parse { line: 1, msg: "expected a single column".into() });
    }
    Ok(m.column(0).to_owned())
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    m: usize,
    n: usize,
    d: usize,
    lambda0: f64,
    seed: Option<u64>,
}

/// Model as a directory: U.csv, V.csv, s_u.csv, s_v.csv + manifest.json.
pub fn save_model(dir: &Path, model: &GroundTruthModel) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (m, n, d) = model.dims();
    write_matrix_csv(&dir.join("U.csv"), &model.u)?;
    write_matrix_csv(&dir.join("V.csv"), &model.v)?;
    write_vector_csv(&dir.join("s_u.csv"), &model.s_u)?;
    write_vector_csv(&dir.join("s_v.csv"), &model.s_v)?;
    let manifest = ModelManifest { m, n, d, lambda0: model.lambda0, seed: model.seed };
    let mut w = BufWriter::new(File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut w, &manifest)
        .map_err(|e| Error::Parse { line: 0, msg: e.to_string() })?;
    w.flush()?;
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<GroundTruthModel> {
    let manifest: ModelManifest = serde_json::from_reader(BufReader::new(File::open(
        dir.join("manifest.json"),
    )?))
    .map_err(|e| Error::Parse { line: 0, msg: e.to_string() })?;
    let u = read_matrix_csv(&dir.join("U.csv"))?;
    let v = read_matrix_csv(&dir.join("V.csv"))?;
    let s_u = read_vector_csv(&dir.join("s_u.csv"))?;
    let s_v = read_vector_csv(&dir.join("s_v.csv"))?;
    if u.dim() != (manifest.m, manifest.d) || v.dim() != (manifest.n, manifest.d) {
        return Err(Error::DimensionMismatch("factor files vs manifest".into()));
    }
    if s_u.len() != manifest.m || s_v.len() != manifest.n {
        return Err(Error::DimensionMismatch("bias files vs manifest".into()));
    }
    let r_u = s_u.mapv(f64::exp);
    let r_v = s_v.mapv(f64::exp);
    Ok(GroundTruthModel {
        u,
        v,
        s_u,
        s_v,
        r_u,
        r_v,
        lambda0: manifest.lambda0,
        seed: manifest.seed,
    })
}

/// Per-side bias table: index, r_hat, s_hat.
pub fn write_bias_csv(path: &Path, r: &Array1<f64>, s: &Array1<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "index,r_hat,s_hat")?;
    for (i, (rv, sv)) in r.iter().zip(s.iter()).enumerate() {
        writeln!(w, "{i},{rv},{sv}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_bias(dir: &Path, est: &BiasEstimate) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_bias_csv(&dir.join("bias_u.csv"), &est.r_u, &est.s_u)?;
    write_bias_csv(&dir.join("bias_v.csv"), &est.r_v, &est.s_v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{generate_ground_truth, sample_counts, BiasPrior, EmbeddingPrior, PriorSpec};

    fn tmpdir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("blramp_io_{tag}_{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn matrix_market_round_trip() {
        let prior = PriorSpec {
            embedding: EmbeddingPrior { sigma2: 0.1, rho: 0.0 },
            bias_u: BiasPrior::ExpShift { rate: 4.0, shift: 0.5 },
            bias_v: BiasPrior::ExpShift { rate: 4.0, shift: 0.5 },
        };
        let model = generate_ground_truth(&prior, 50, 70, 3, 4).unwrap();
        let z = sample_counts(&model, 5).unwrap();
        let dir = tmpdir("mm");
        let path = dir.join("z.mtx");
        write_matrix_market(&path, &z).unwrap();
        let z2 = read_matrix_market(&path).unwrap();
        assert_eq!(z, z2);
        // Writer output is canonical: a second round trip is byte-identical.
        let path2 = dir.join("z2.mtx");
        write_matrix_market(&path2, &z2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn matrix_market_rejects_garbage() {
        let dir = tmpdir("bad");
        let p = dir.join("bad.mtx");
        fs::write(&p, "%%MatrixMarket matrix coordinate real general\n1 1 0\n").unwrap();
        assert!(read_matrix_market(&p).is_err());
        fs::write(&p, "%%MatrixMarket matrix coordinate integer general\n2 2 1\n1 1 -3\n")
            .unwrap();
        match read_matrix_market(&p) {
            Err(Error::InvalidParameter(_)) => {}
            other => panic!("expected negative-count rejection, got {other:?}"),
        }
        fs::write(&p, "%%MatrixMarket matrix coordinate integer general\n2 2 1\n3 1 2\n")
            .unwrap();
        match read_matrix_market(&p) {
            Err(Error::Parse { line: 3, .. }) => {}
            other => panic!("expected parse error with line, got {other:?}"),
        }
    }

    #[test]
    fn model_dir_round_trip() {
        let prior = PriorSpec {
            embedding: EmbeddingPrior { sigma2: 0.2, rho: 0.5 },
            bias_u: BiasPrior::Zipf { alpha: 0.8, c0: 1.0 },
            bias_v: BiasPrior::ExpShift { rate: 4.0, shift: 2.0 },
        };
        let model = generate_ground_truth(&prior, 20, 30, 4, 9).unwrap();
        let dir = tmpdir("model");
        save_model(&dir, &model).unwrap();
        let back = load_model(&dir).unwrap();
        assert_eq!(model.u, back.u);
        assert_eq!(model.v, back.v);
        assert_eq!(model.s_u, back.s_u);
        assert_eq!(model.lambda0, back.lambda0);
        assert_eq!(model.seed, back.seed);
        // r rebuilt from s
        for (a, b) in model.r_u.iter().zip(back.r_u.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn float_csv_round_trip_is_exact() {
        let x = crate::rng::gaussian_matrix(3, crate::rng::Domain::Init, 17, 5, 1.2345);
        let dir = tmpdir("csv");
        let p = dir.join("x.csv");
        write_matrix_csv(&p, &x).unwrap();
        let back = read_matrix_csv(&p).unwrap();
        assert_eq!(x, back);
    }
}
