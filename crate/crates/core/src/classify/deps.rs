use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::CodeFacts;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DependencyEdge {
    pub from_unit: String,
    pub to_unit: String,
    pub variable: String,
}

/// Def-use edges between units. `order` lists unit ids in execution order;
/// units absent from it take no part. For a variable written by several
/// earlier units, only the latest writer gets the edge.
pub fn infer_dependencies(units: &[(String, CodeFacts)], order: &[String]) -> Vec<DependencyEdge> {
    let by_id: BTreeMap<&str, &CodeFacts> = units.iter().map(|(id, f)| (id.as_str(), f)).collect();
    let mut last_writer: BTreeMap<&str, &str> = BTreeMap::new();
    let mut edges = BTreeSet::new();
    for id in order {
        let Some(facts) = by_id.get(id.as_str()) else { continue };
        for var in &facts.reads {
            if let Some(writer) = last_writer.get(var.as_str()) {
                if *writer != id.as_str() {
                    edges.insert(DependencyEdge {
                        from_unit: (*writer).to_owned(),
                        to_unit: id.clone(),
                        variable: var.clone(),
                    });
                }
            }
        }
        for var in &facts.writes {
            last_writer.insert(var.as_str(), id.as_str());
        }
    }
    edges.into_iter().collect()
}
