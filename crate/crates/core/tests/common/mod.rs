#![allow(dead_code)]

use std::path::PathBuf;

use distill_core::corpus::{self, SeedExample};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures").join(name)
}

pub fn puzzle() -> SeedExample {
    corpus::load_seed(&fixture("group_puzzle.json")).unwrap().remove(0)
}

pub fn small_seed() -> Vec<SeedExample> {
    corpus::load_seed(&fixture("seed_small.jsonl")).unwrap()
}
