//! Dataset files: a CSV of load vectors plus a JSON sidecar.

use std::ops::Range;
use std::path::{Path, PathBuf};

use acopf::training::Dataset;
use acopf::NetworkModel;
use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub samples: usize,
    pub seed: u64,
    pub case_checksum: String,
    pub units: String,
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

fn header(network: &NetworkModel) -> Vec<String> {
    let ids = network.buses.iter().map(|b| b.id);
    ids.clone()
        .map(|id| format!("pd_{id}"))
        .chain(ids.map(|id| format!("qd_{id}")))
        .collect()
}

pub fn write(path: &Path, dataset: &Dataset, network: &NetworkModel) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(header(network))?;
    for x in &dataset.samples {
        w.write_record(x.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    let meta = DatasetMeta {
        samples: dataset.samples.len(),
        seed: dataset.seed,
        case_checksum: dataset.case_checksum.clone(),
        units: "per unit on the case MVA base".into(),
        train: dataset.train.clone(),
        val: dataset.val.clone(),
        test: dataset.test.clone(),
    };
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_string_pretty(&meta)? + "\n")
        .with_context(|| format!("writing {}", side.display()))?;
    Ok(())
}

pub fn read(path: &Path, network: &NetworkModel) -> Result<Dataset> {
    let side = sidecar_path(path);
    let meta: DatasetMeta = serde_json::from_str(
        &std::fs::read_to_string(&side).with_context(|| format!("reading {}", side.display()))?,
    )
    .with_context(|| format!("parsing {}", side.display()))?;
    if meta.case_checksum != network.checksum {
        bail!(
            "dataset {} was generated for case checksum {}, not {}",
            path.display(),
            meta.case_checksum,
            network.checksum
        );
    }
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let expected = header(network);
    if r.headers()?.iter().ne(expected.iter().map(String::as_str)) {
        bail!("{}: header does not match the case buses", path.display());
    }
    let mut samples = Vec::with_capacity(meta.samples);
    for (line, record) in r.records().enumerate() {
        let record = record?;
        let x = record
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .with_context(|| format!("{}: row {}", path.display(), line + 1))?;
        samples.push(x);
    }
    let n = samples.len();
    if n != meta.samples || meta.train.end > n || meta.val.end > n || meta.test.end > n {
        bail!("{}: {} rows disagree with the sidecar", path.display(), n);
    }
    Ok(Dataset {
        samples,
        train: meta.train,
        val: meta.val,
        test: meta.test,
        seed: meta.seed,
        case_checksum: meta.case_checksum,
    })
}
