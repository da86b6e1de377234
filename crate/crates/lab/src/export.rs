//! Plain-text dumps of the generated data, for inspection outside this tool.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};
use tta_core::datagen::{Dataset, Stream};

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::experiments::Lab;
use crate::report::{fmt_float, write_text, Table};

#[derive(Debug, Serialize)]
struct FileEntry {
    name: String,
    rows: usize,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    config: &'a ExperimentConfig,
    config_hash: &'a str,
    columns: Vec<String>,
    files: Vec<FileEntry>,
}

fn header(dim: usize) -> Vec<String> {
    let mut h: Vec<String> = ["id", "split", "batch", "label"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    h.extend((0..dim).map(|i| format!("f{i}")));
    h
}

fn dataset_table(split: &str, data: &Dataset, dim: usize) -> Table {
    let h = header(dim);
    let mut t = Table::new(&h.iter().map(String::as_str).collect::<Vec<_>>());
    for (i, label) in data.y.iter().enumerate() {
        let mut row = vec![
            i.to_string(),
            split.into(),
            String::new(),
            label.to_string(),
        ];
        row.extend(data.x.row(i).iter().map(|v| fmt_float(*v)));
        t.push(row);
    }
    t
}

fn stream_table(stream: &Stream, dim: usize) -> Table {
    let h = header(dim);
    let mut t = Table::new(&h.iter().map(String::as_str).collect::<Vec<_>>());
    let mut id = 0;
    for (b, batch) in stream.batches.iter().enumerate() {
        for (i, label) in batch.labels.reveal().iter().enumerate() {
            let mut row = vec![
                id.to_string(),
                "test".into(),
                b.to_string(),
                label.to_string(),
            ];
            row.extend(batch.features.row(i).iter().map(|v| fmt_float(*v)));
            t.push(row);
            id += 1;
        }
    }
    t
}

/// Writes the source splits, one shifted stream per seed, and `manifest.json`.
pub fn export_data(lab: &Lab, dir: &Path) -> Result<()> {
    let dim = lab.config.task.dim;
    let (train, val) = lab.task.source_splits();
    let mut tables = vec![
        (
            "source_train.csv".to_string(),
            dataset_table("train", &train, dim),
        ),
        (
            "source_val.csv".to_string(),
            dataset_table("val", &val, dim),
        ),
    ];
    for &seed in &lab.config.seeds {
        let stream = lab.stream(&lab.config.shift, seed)?;
        tables.push((
            format!("stream_seed_{seed}.csv"),
            stream_table(&stream, dim),
        ));
    }
    let mut files = Vec::new();
    for (name, table) in &tables {
        let text = table.to_csv()?;
        write_text(&dir.join(name), &text)?;
        let digest = Sha256::digest(text.as_bytes());
        files.push(FileEntry {
            name: name.clone(),
            rows: table.rows.len(),
            sha256: digest.iter().map(|b| format!("{b:02x}")).collect(),
        });
    }
    let manifest = Manifest {
        config: &lab.config,
        config_hash: &lab.config_hash,
        columns: header(dim),
        files,
    };
    write_text(
        &dir.join("manifest.json"),
        &(serde_json::to_string_pretty(&manifest)? + "\n"),
    )
}
