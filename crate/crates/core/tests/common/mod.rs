#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use kgrag::config::Config;
use kgrag::gateway::{FixtureEntry, FixtureMatch, Gateway, HashEmbedder, ScriptedProvider};
use kgrag::orchestrator::Engine;
use kgrag::store::GraphStore;

pub const HAPPY_QUERY: &str = "How much taller is Simiao 8 than Zhefu 802?";

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn corpus_file(name: &str) -> PathBuf {
    fixtures().join("corpus").join(name)
}

pub fn corpus() -> Vec<PathBuf> {
    ["jiazao.md", "simiao.md", "zhefu.md"].iter().map(|n| corpus_file(n)).collect()
}

pub fn fixture_config(store: &Path) -> Config {
    let mut config = Config::from_file(&fixtures().join("kgrag.toml")).unwrap();
    config.store.path = store.to_path_buf();
    config
}

/// An engine over a freshly ingested copy of the fixture corpus.
pub fn ingested_engine(store: &Path) -> Engine {
    ingested_engine_with(fixture_config(store))
}

pub fn ingested_engine_with(config: Config) -> Engine {
    let engine = Engine::open(config).unwrap();
    let report = engine.ingest(&corpus()).unwrap();
    assert!(report.failed.is_empty(), "{:?}", report.failed);
    engine
}

/// Ingests the fixture corpus into `dir` and returns the loaded store.
pub fn fixture_store(dir: &Path) -> GraphStore {
    ingested_engine(dir);
    GraphStore::load(dir).unwrap()
}

/// Scripted gateway with the fixture configuration's embedder.
pub fn gateway(config: &Config, entries: Vec<FixtureEntry>) -> Gateway {
    let embedder =
        HashEmbedder { dimension: config.provider.embedding_dimension, mode: config.provider.embedding_mode };
    Gateway::scripted(ScriptedProvider::new(entries).with_embedder(embedder))
}

pub fn rule(system: Option<&str>, user: Option<&str>, any: Option<&str>, completion: &str) -> FixtureEntry {
    FixtureEntry::rule(
        FixtureMatch {
            system: system.map(str::to_string),
            user: user.map(str::to_string),
            any: any.map(str::to_string),
            absent: None,
        },
        completion,
    )
}

pub fn happy_plan() -> String {
    let plan = serde_json::json!([
        {"id": 1, "subquery": "plant height of Simiao 8", "operator": "Retrieve", "args": {"query": "plant height of Simiao 8"}, "refs": []},
        {"id": 2, "subquery": "plant height of Zhefu 802", "operator": "Retrieve", "args": {"query": "plant height of Zhefu 802"}, "refs": []},
        {"id": 3, "subquery": "height difference", "operator": "Math", "args": {"expr": "s1 - s2"}, "refs": [1, 2]},
        {"id": 4, "subquery": "answer", "operator": "Answer", "args": {"refs": [3]}, "refs": [3]}
    ]);
    format!("<<<PLAN\n{plan}\nPLAN>>>")
}

/// Every file of a dumped store, by name.
pub fn read_dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect()
}
