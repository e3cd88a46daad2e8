//! Shared fixtures for the criterion benches.

use std::path::PathBuf;
use std::sync::Arc;

use acopf::opf_model::OpfModel;
use acopf::NetworkModel;

pub fn case_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../cases").join(name)
}

pub fn network(name: &str) -> NetworkModel {
    acopf::load_case(case_path(name)).expect("bundled case loads")
}

pub fn model(name: &str) -> OpfModel {
    OpfModel::new(Arc::new(network(name)))
}
