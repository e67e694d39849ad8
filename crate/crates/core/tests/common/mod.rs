#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::IndexedRandom;
use rand::Rng;
use serde_json::{json, Value};

use pkl_core::store::{NewProcedure, ProcedureRecord, Store};
use pkl_core::FileSet;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn fixture_text(rel: &str) -> String {
    std::fs::read_to_string(fixtures().join(rel)).unwrap_or_else(|e| panic!("fixture {rel}: {e}"))
}

pub fn open_store(dir: &Path) -> Store {
    Store::open(&dir.join("pkl")).expect("store opens")
}

/// Notebook JSON the way Jupyter writes it: one-space indent, non-ASCII kept.
pub fn jupyter_json(v: &Value) -> String {
    let mut buf = Vec::new();
    let fmt = serde_json::ser::PrettyFormatter::with_indent(b" ");
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, fmt);
    serde::Serialize::serialize(v, &mut ser).expect("json serializes");
    let mut s = String::from_utf8(buf).expect("utf8");
    s.push('\n');
    s
}

pub fn source_lines(src: &str) -> Value {
    Value::Array(src.split_inclusive('\n').map(|l| Value::String(l.to_owned())).collect())
}

#[derive(Debug, Clone)]
pub struct SynthCell {
    pub id: String,
    pub markdown: bool,
    pub source: String,
    pub count: Option<u64>,
}

const WORDS: &[&str] = &["loss", "accuracy", "baseline", "split", "features", "labels", "résumé", "epoch", "grid", "cohort"];

fn code_cell(rng: &mut impl Rng, i: usize) -> String {
    let n = rng.random_range(1..500);
    match rng.random_range(0..11) {
        0 => "import pandas as pd\nimport numpy as np\nfrom sklearn.ensemble import RandomForestClassifier".to_owned(),
        1 => format!("df{i} = pd.read_csv('data/part_{n}.csv')\ndf{i}.head()"),
        2 => format!("frame_{i} = pd.read_parquet(\"s3://bucket/{n}.parquet\")"),
        3 => format!("df = df.dropna()\ndf['x{i}'] = df['x{i}'].astype(float)"),
        4 => format!("learning_rate = 0.{n}\nbatch_size = {}\n# tuned by hand", n * 2),
        5 => format!("model = RandomForestClassifier(n_estimators={n})\nmodel.fit(X_train, y_train)"),
        6 => format!("import matplotlib.pyplot as plt\nplt.plot(history_{i})\nplt.title(\"run {n}\")"),
        7 => format!("def augment_{i}(img):\n    \"\"\"flip {n}\"\"\"\n    return img[:, ::-1]\n"),
        8 => format!("df.to_csv('out_{i}.csv', index=False)"),
        9 => format!("%matplotlib inline\nx_{i} = [k ** 2 for k in range({n})]"),
        _ => format!("total_{i} = sum(range({n}))\nprint(total_{i})  # {}", WORDS.choose(rng).unwrap()),
    }
}

fn markdown_cell(rng: &mut impl Rng, i: usize) -> String {
    let w = WORDS.choose(rng).unwrap();
    match rng.random_range(0..3) {
        0 => format!("## Step {i}\nNotes on the {w}."),
        1 => format!("* check {w}\n* compare with `read_csv` output\n"),
        _ => format!("```python\nprint({i})\n```\nsee above ({w})"),
    }
}

pub fn synth_cells(rng: &mut impl Rng, n_cells: usize) -> Vec<SynthCell> {
    let mut count = 0;
    (0..n_cells)
        .map(|i| {
            let markdown = rng.random_bool(0.25);
            let source = if markdown { markdown_cell(rng, i) } else { code_cell(rng, i) };
            let c = if markdown || rng.random_bool(0.1) {
                None
            } else {
                count += 1;
                Some(count)
            };
            SynthCell { id: format!("{:08x}", rng.next_u32()), markdown, source, count: c }
        })
        .collect()
}

/// nbformat 4.5 (with ids) or 4.4 (without), with a few outputs.
pub fn render_cells(cells: &[SynthCell], with_ids: bool, seed: u64) -> String {
    let cells: Vec<Value> = cells
        .iter()
        .map(|c| {
            let mut o = serde_json::Map::new();
            o.insert("cell_type".into(), json!(if c.markdown { "markdown" } else { "code" }));
            if with_ids {
                o.insert("id".into(), json!(c.id));
            }
            o.insert("metadata".into(), json!({}));
            o.insert("source".into(), source_lines(&c.source));
            if !c.markdown {
                o.insert("execution_count".into(), json!(c.count));
                let outputs = match c.count {
                    Some(n) if n % 3 == 0 => json!([{"name": "stdout", "output_type": "stream", "text": [format!("{n}\n")]}]),
                    Some(n) if n % 3 == 1 => json!([{"data": {"text/plain": [format!("Out {n}")]}, "execution_count": n, "metadata": {}, "output_type": "execute_result"}]),
                    _ => json!([]),
                };
                o.insert("outputs".into(), outputs);
            }
            Value::Object(o)
        })
        .collect();
    let doc = json!({
        "cells": cells,
        "metadata": {"kernelspec": {"display_name": "Python 3", "language": "python", "name": "python3"}, "pkl_seed": seed},
        "nbformat": 4,
        "nbformat_minor": if with_ids { 5 } else { 4 }
    });
    jupyter_json(&doc)
}

pub fn synth_notebook(rng: &mut impl Rng, n_cells: usize, seed: u64) -> String {
    let cells = synth_cells(rng, n_cells);
    render_cells(&cells, rng.random_bool(0.8), seed)
}

pub fn synth_config(rng: &mut impl Rng) -> (String, Value) {
    let hp = json!({
        "learning_rate": (rng.random_range(1..1000) as f64) / 10000.0,
        "batch_size": 2u64.pow(rng.random_range(4..9)),
        "epochs": rng.random_range(1..100),
    });
    let cfg = json!({
        "model": {"arch": "resnet", "depth": rng.random_range(10..60)},
        "training": {"hyperparameters": hp.clone(), "optimizer": "adam"},
    });
    (serde_json::to_string_pretty(&cfg).unwrap() + "\n", hp)
}

/// A procedure directory with `train.ipynb`, `model_config.json` and a helper script.
pub fn synth_procedure(rng: &mut impl Rng, dir: &Path, n_cells: usize, seed: u64) -> FileSet {
    let mut fs = FileSet::new();
    fs.insert("train.ipynb", synth_notebook(rng, n_cells, seed));
    fs.insert("configs/model_config.json", synth_config(rng).0);
    fs.insert("utils/helpers.py", format!("import numpy as np\n\n\ndef scale(x):\n    return x / {}\n", rng.random_range(2..9)));
    fs.write_dir(dir).unwrap();
    fs
}

pub fn create(store: &mut Store, name: &str, base: &Path, tags: &[&str], trace: Option<&str>) -> ProcedureRecord {
    let trace = trace.map(|t| pkl_core::ingest::trace::parse_trace(t).expect("fixture trace parses"));
    store
        .create_procedure(NewProcedure {
            name: name.to_owned(),
            base_path: base.to_owned(),
            description: String::new(),
            tags: tags.iter().map(|t| (*t).to_owned()).collect(),
            schema: None,
            trace,
        })
        .expect("procedure created")
}

/// Pad the store with one-line script procedures until the next id is `procedure-{next}`.
pub fn pad_procedures(store: &mut Store, scratch: &Path, next: usize) {
    let have = store.list_procedures().unwrap().len();
    for i in have + 1..next {
        let p = scratch.join(format!("filler_{i}.py"));
        std::fs::write(&p, format!("x = {i}\n")).unwrap();
        create(store, &format!("filler-{i}"), &p, &["filler"], None);
    }
}

/// Independent reading of trigram coverage: padded word trigrams as strings.
pub fn oracle_trigram(query: &str, text: &str) -> f64 {
    fn grams(s: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let lowered = s.to_lowercase();
        for word in lowered.split(|c: char| !c.is_alphanumeric()) {
            if word.is_empty() {
                continue;
            }
            let padded: Vec<char> = format!("  {word} ").chars().collect();
            for i in 0..padded.len() - 2 {
                out.insert(padded[i..i + 3].iter().collect());
            }
        }
        out
    }
    let q = grams(query);
    if q.is_empty() {
        return 0.0;
    }
    let t = grams(text);
    q.iter().filter(|g| t.contains(*g)).count() as f64 / q.len() as f64
}

pub fn oracle_tag_eq(a: &str, b: &str) -> bool {
    let norm = |s: &str| s.trim().chars().map(|c| if c == '-' || c == '_' { ' ' } else { c }).collect::<String>().to_lowercase();
    norm(a) == norm(b)
}
