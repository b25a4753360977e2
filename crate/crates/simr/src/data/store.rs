//! Dataset on-disk layout: a manifest describing every binary tensor file
//! (shape and exact byte size), six raw little-endian f32 files, and one
//! JSON report list per split.

use crate::data::generate::{Dataset, GenConfig, Report, Split};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

#[derive(Serialize, Deserialize)]
struct FileEntry {
    shape: Vec<usize>,
    bytes: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: GenConfig,
    concepts: Vec<String>,
    files: BTreeMap<String, FileEntry>,
}

const SPLITS: [&str; 3] = ["train", "val", "test"];

fn write_f32(path: &Path, data: &[f32]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

fn read_f32(path: &Path, expect: usize) -> Result<Vec<f32>> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    if bytes.len() != expect * 4 {
        return Err(Error::Data(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            expect * 4,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let cfg = &ds.config;
    let mut files = BTreeMap::new();
    for (name, split) in SPLITS.iter().zip([&ds.train, &ds.val, &ds.test]) {
        let img_name = format!("images_{name}.f32");
        let lab_name = format!("labels_{name}.f32");
        write_f32(&dir.join(&img_name), &split.images)?;
        write_f32(&dir.join(&lab_name), &split.labels)?;
        files.insert(
            img_name,
            FileEntry {
                shape: vec![split.n, cfg.l, cfg.p],
                bytes: (split.images.len() * 4) as u64,
            },
        );
        files.insert(
            lab_name,
            FileEntry {
                shape: vec![split.n, cfg.k],
                bytes: (split.labels.len() * 4) as u64,
            },
        );
        let rep = File::create(dir.join(format!("reports_{name}.json")))?;
        serde_json::to_writer_pretty(BufWriter::new(rep), &split.reports)
            .map_err(|e| Error::Data(format!("writing reports: {e}")))?;
    }
    let manifest = Manifest {
        config: cfg.clone(),
        concepts: ds.concepts.clone(),
        files,
    };
    let mf = File::create(dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(BufWriter::new(mf), &manifest)
        .map_err(|e| Error::Data(format!("writing manifest: {e}")))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mf_path = dir.join("manifest.json");
    let mf = File::open(&mf_path)
        .map_err(|e| Error::Data(format!("{}: {e}", mf_path.display())))?;
    let manifest: Manifest = serde_json::from_reader(BufReader::new(mf))
        .map_err(|e| Error::Data(format!("{}: {e}", mf_path.display())))?;
    let cfg = manifest.config.clone();
    cfg.validate()?;

    let mut splits = Vec::with_capacity(3);
    for (name, n) in SPLITS.iter().zip([cfg.n_train, cfg.n_val, cfg.n_test]) {
        for (file, want_shape) in [
            (format!("images_{name}.f32"), vec![n, cfg.l, cfg.p]),
            (format!("labels_{name}.f32"), vec![n, cfg.k]),
        ] {
            let entry = manifest
                .files
                .get(&file)
                .ok_or_else(|| Error::Data(format!("manifest is missing {file}")))?;
            if entry.shape != want_shape {
                return Err(Error::Data(format!(
                    "{file}: manifest shape {:?} does not match config shape {want_shape:?}",
                    entry.shape
                )));
            }
            let numel: usize = entry.shape.iter().product();
            if entry.bytes != (numel * 4) as u64 {
                return Err(Error::Data(format!(
                    "{file}: manifest bytes {} inconsistent with shape {:?}",
                    entry.bytes, entry.shape
                )));
            }
            let meta = std::fs::metadata(dir.join(&file))
                .map_err(|e| Error::Data(format!("{file}: {e}")))?;
            if meta.len() != entry.bytes {
                return Err(Error::Data(format!(
                    "{file}: on disk {} bytes, manifest says {}",
                    meta.len(),
                    entry.bytes
                )));
            }
        }
        let images = read_f32(&dir.join(format!("images_{name}.f32")), n * cfg.l * cfg.p)?;
        let labels = read_f32(&dir.join(format!("labels_{name}.f32")), n * cfg.k)?;
        let rep_path = dir.join(format!("reports_{name}.json"));
        let rep = File::open(&rep_path).map_err(|e| Error::Data(format!("{}: {e}", rep_path.display())))?;
        let reports: Vec<Report> = serde_json::from_reader(BufReader::new(rep))
            .map_err(|e| Error::Data(format!("{}: {e}", rep_path.display())))?;
        if reports.len() != n {
            return Err(Error::Data(format!(
                "reports_{name}.json: {} reports, config says {n}",
                reports.len()
            )));
        }
        splits.push(Split {
            n,
            images,
            labels,
            reports,
        });
    }
    let test = splits.pop().unwrap();
    let val = splits.pop().unwrap();
    let train = splits.pop().unwrap();
    Ok(Dataset {
        config: cfg,
        concepts: manifest.concepts,
        train,
        val,
        test,
    })
}
