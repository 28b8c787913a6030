//! Per-vehicle dataset directories.
//!
//! A directory holds `manifest.json` plus one `vehicle_NNN.csv` per vehicle
//! with columns `index, split, label, x0 .. x{d-1}`. Rows are listed split
//! by split in split order, so reading a file back reproduces the exact
//! split permutation local training sees.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sigla_core::dataset::{Category, GenConfig, Splits, VehicleDataset};
use sigla_core::nn::{Samples, Tensor};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleEntry {
    pub vehicle_id: usize,
    pub category: Category,
    pub planted_cluster: usize,
    pub seed: u64,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator: GenConfig,
    pub feature_dim: usize,
    pub vehicles: Vec<VehicleEntry>,
}

fn vehicle_file(id: usize) -> String {
    format!("vehicle_{id:03}.csv")
}

pub fn write_dir(dir: &Path, datasets: &[VehicleDataset], generator: &GenConfig) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let d = generator.feature_dim();
    let mut vehicles = Vec::with_capacity(datasets.len());
    for ds in datasets {
        let file = vehicle_file(ds.vehicle_id);
        let path = dir.join(&file);
        let mut w = csv::Writer::from_path(&path)?;
        let mut header = vec!["index".to_string(), "split".into(), "label".into()];
        header.extend((0..d).map(|i| format!("x{i}")));
        w.write_record(&header)?;
        for (name, idx) in [
            ("train", &ds.splits.train),
            ("val", &ds.splits.val),
            ("test", &ds.splits.test),
        ] {
            for &i in idx {
                let mut rec = vec![i.to_string(), name.to_string(), ds.samples.labels[i].to_string()];
                rec.extend(ds.samples.features.row(i).iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        vehicles.push(VehicleEntry {
            vehicle_id: ds.vehicle_id,
            category: ds.category,
            planted_cluster: ds.planted_cluster,
            seed: ds.seed,
            file,
        });
    }
    let manifest = Manifest {
        generator: generator.clone(),
        feature_dim: d,
        vehicles,
    };
    let path = dir.join(MANIFEST);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn read_vehicle(path: &Path, entry: &VehicleEntry, d: usize) -> Result<VehicleDataset> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows: Vec<Option<(usize, Vec<f64>)>> = Vec::new();
    let mut splits = Splits {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for (n, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != 3 + d {
            return Err(Error::format(
                path,
                format!("row {n} has {} columns, expected {}", rec.len(), 3 + d),
            ));
        }
        let bad = |what: &str| Error::format(path, format!("row {n}: bad {what}"));
        let index: usize = rec[0].parse().map_err(|_| bad("index"))?;
        match &rec[1] {
            "train" => splits.train.push(index),
            "val" => splits.val.push(index),
            "test" => splits.test.push(index),
            _ => return Err(bad("split")),
        }
        let label = rec[2].parse().map_err(|_| bad("label"))?;
        let x = rec
            .iter()
            .skip(3)
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>();
        if rows.len() <= index {
            rows.resize(index + 1, None);
        }
        if rows[index].replace((label, x.map_err(|_| bad("feature"))?)).is_some() {
            return Err(Error::format(path, format!("row {n} repeats index {index}")));
        }
    }
    if rows.is_empty() {
        return Err(Error::format(path, "no samples"));
    }
    let mut features = Vec::with_capacity(rows.len() * d);
    let mut labels = Vec::with_capacity(rows.len());
    for (i, row) in rows.into_iter().enumerate() {
        let (label, x) = row.ok_or_else(|| Error::format(path, format!("index {i} missing")))?;
        labels.push(label);
        features.extend(x);
    }
    let samples = Samples::new(Tensor::matrix(labels.len(), d, features)?, labels)?;
    splits.validate(samples.len())?;
    Ok(VehicleDataset {
        vehicle_id: entry.vehicle_id,
        category: entry.category,
        planted_cluster: entry.planted_cluster,
        seed: entry.seed,
        samples,
        splits,
    })
}

pub fn read_dir(dir: &Path) -> Result<(Manifest, Vec<VehicleDataset>)> {
    let path = dir.join(MANIFEST);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    let n_sectors = manifest.generator.n_sectors;
    let mut out = Vec::with_capacity(manifest.vehicles.len());
    for (i, entry) in manifest.vehicles.iter().enumerate() {
        if entry.vehicle_id != i {
            return Err(Error::format(
                &path,
                format!("vehicle {i} listed with id {}", entry.vehicle_id),
            ));
        }
        let ds = read_vehicle(&dir.join(&entry.file), entry, manifest.feature_dim)?;
        if let Some(l) = ds.samples.labels.iter().find(|&&l| l >= n_sectors) {
            return Err(Error::format(
                dir.join(&entry.file),
                format!("label {l} >= {n_sectors} sectors"),
            ));
        }
        out.push(ds);
    }
    Ok((manifest, out))
}
