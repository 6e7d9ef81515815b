//! Particle CSV files.

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;

use crate::ensemble::ParticleEnsemble;
use crate::error::{Error, Result};

/// `particles_<iter>.csv`
pub fn particles_file_name(iteration: usize) -> String {
    format!("particles_{iteration}.csv")
}

/// Writes one row per particle: `iteration,particle,coord_0..coord_{d-1}`,
/// with coordinates in `{:.16e}` so every value round-trips exactly.
pub fn write_particles_csv<W: Write>(ensemble: &ParticleEnsemble, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let d = ensemble.dim();
    let mut header = vec!["iteration".to_string(), "particle".to_string()];
    header.extend((0..d).map(|i| format!("coord_{i}")));
    w.write_record(&header).map_err(csv_error)?;
    let iteration = ensemble.iteration().to_string();
    let mut row = Vec::with_capacity(d + 2);
    for (i, col) in ensemble.positions().column_iter().enumerate() {
        row.clear();
        row.push(iteration.clone());
        row.push(i.to_string());
        row.extend(col.iter().map(|v| format!("{v:.16e}")));
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn particles_csv_string(ensemble: &ParticleEnsemble) -> String {
    let mut buf = Vec::new();
    write_particles_csv(ensemble, &mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("csv output is ASCII")
}

pub fn save_particles(ensemble: &ParticleEnsemble, dir: &Path) -> Result<()> {
    let file = std::fs::File::create(dir.join(particles_file_name(ensemble.iteration())))?;
    write_particles_csv(ensemble, std::io::BufWriter::new(file))
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Parse {
            line,
            message: format!("{kind:?}"),
        },
    }
}

/// Parses a particle file written by [`write_particles_csv`]. All rows must
/// share one iteration and list particles `0..n` in order.
pub fn parse_particles_csv(text: &str) -> Result<ParticleEnsemble> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = r.headers().map_err(csv_error)?.clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 3 || cols[0] != "iteration" || cols[1] != "particle" {
        return Err(Error::Parse {
            line: 1,
            message: "header must start with iteration,particle,coord_0".into(),
        });
    }
    let d = cols.len() - 2;
    for (i, c) in cols[2..].iter().enumerate() {
        if *c != format!("coord_{i}") {
            return Err(Error::Parse {
                line: 1,
                message: format!("column {} should be coord_{i}, found {c:?}", i + 2),
            });
        }
    }
    let mut iteration = None;
    let mut values = Vec::new();
    let mut n = 0usize;
    for rec in r.records() {
        let rec = rec.map_err(csv_error)?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let bad = |message: String| Error::Parse { line, message };
        if rec.len() != d + 2 {
            return Err(bad(format!("expected {} fields, found {}", d + 2, rec.len())));
        }
        let it: usize = rec[0].parse().map_err(|e| bad(format!("iteration: {e}")))?;
        if *iteration.get_or_insert(it) != it {
            return Err(bad(format!("iteration {it} differs from the first row")));
        }
        let p: usize = rec[1].parse().map_err(|e| bad(format!("particle: {e}")))?;
        if p != n {
            return Err(bad(format!("expected particle {n}, found {p}")));
        }
        for (i, field) in rec.iter().skip(2).enumerate() {
            let v: f64 = field.parse().map_err(|e| bad(format!("coord_{i}: {e}")))?;
            if !v.is_finite() {
                return Err(bad(format!("coord_{i} is not finite")));
            }
            values.push(v);
        }
        n += 1;
    }
    let Some(iteration) = iteration else {
        return Err(Error::Parse {
            line: 2,
            message: "no particle rows".into(),
        });
    };
    Ok(ParticleEnsemble::from_columns(DMatrix::from_vec(d, n, values))?.with_iteration(iteration))
}
