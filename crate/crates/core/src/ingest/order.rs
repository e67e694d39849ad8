use serde::{Deserialize, Serialize};

use super::{CellKind, NotebookDoc};

/// The order in which code cells were run in the recorded session.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionOrder {
    /// Executed code cells, ascending by execution count (ties by document position).
    pub executed: Vec<String>,
    /// Code cells without an execution count, in document order.
    pub unexecuted: Vec<String>,
    /// Diagnostics such as duplicate execution counts.
    pub warnings: Vec<String>,
}

impl ExecutionOrder {
    /// Position of `cell_id` in the combined order (executed first), if it is a code cell.
    pub fn rank(&self, cell_id: &str) -> Option<usize> {
        self.executed
            .iter()
            .chain(&self.unexecuted)
            .position(|id| id == cell_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.executed.iter().chain(&self.unexecuted).map(String::as_str)
    }
}

pub fn reconstruct_execution_order(doc: &NotebookDoc) -> ExecutionOrder {
    let mut executed: Vec<(u64, usize, &str)> = Vec::new();
    let mut unexecuted = Vec::new();
    for (pos, cell) in doc.cells.iter().enumerate() {
        if cell.kind != CellKind::Code {
            continue;
        }
        match cell.execution_count {
            Some(n) => executed.push((n, pos, &cell.cell_id)),
            None => unexecuted.push(cell.cell_id.clone()),
        }
    }
    // Stable on (count, document position).
    executed.sort_unstable_by_key(|&(n, pos, _)| (n, pos));

    let mut warnings = Vec::new();
    for pair in executed.windows(2) {
        if pair[0].0 == pair[1].0 {
            warnings.push(format!(
                "{}: cells {} and {} share execution_count {}; ordered by document position",
                doc.source_path, pair[0].2, pair[1].2, pair[0].0
            ));
        }
    }

    ExecutionOrder {
        executed: executed.into_iter().map(|(_, _, id)| id.to_owned()).collect(),
        unexecuted,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::Cell;
    use proptest::prelude::*;

    fn doc(counts: &[Option<u64>]) -> NotebookDoc {
        let cells = counts
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let mut cell = Cell::synthetic(format!("cell#{}", i + 1), String::new());
                cell.execution_count = *c;
                cell
            })
            .collect();
        NotebookDoc {
            cells,
            notebook_metadata: Default::default(),
            source_path: "t.ipynb".into(),
            format_version: "4.5".into(),
            extra: Default::default(),
        }
    }

    #[test]
    fn sorted_by_count_with_unexecuted_tail() {
        let order = reconstruct_execution_order(&doc(&[Some(2), Some(1), None]));
        assert_eq!(order.executed, ["cell#2", "cell#1"]);
        assert_eq!(order.unexecuted, ["cell#3"]);
        assert!(order.warnings.is_empty());
    }

    #[test]
    fn all_absent() {
        let order = reconstruct_execution_order(&doc(&[None, None, None]));
        assert!(order.executed.is_empty());
        assert_eq!(order.unexecuted, ["cell#1", "cell#2", "cell#3"]);
    }

    #[test]
    fn duplicate_counts_keep_document_order_and_warn() {
        let d = doc(&[Some(1), Some(1)]);
        let order = reconstruct_execution_order(&d);
        assert_eq!(order.executed, ["cell#1", "cell#2"]);
        assert_eq!(order.warnings.len(), 1);
        // both counts retained in the model
        assert!(d.cells.iter().all(|c| c.execution_count == Some(1)));
    }

    #[test]
    fn markdown_is_not_ordered() {
        let mut d = doc(&[Some(1), None]);
        d.cells[1].kind = CellKind::Markdown;
        let order = reconstruct_execution_order(&d);
        assert_eq!(order.executed, ["cell#1"]);
        assert!(order.unexecuted.is_empty());
    }

    proptest! {
        #[test]
        fn partition_covers_code_cells(counts in proptest::collection::vec(proptest::option::of(0u64..6), 0..20)) {
            let d = doc(&counts);
            let order = reconstruct_execution_order(&d);
            let mut all: Vec<_> = order.iter().map(str::to_owned).collect();
            prop_assert_eq!(all.len(), d.cells.len());
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), d.cells.len());
            let ranks: Vec<(u64, usize)> = order.executed.iter().map(|id| {
                let pos = d.cells.iter().position(|c| &c.cell_id == id).unwrap();
                (d.cells[pos].execution_count.unwrap(), pos)
            }).collect();
            prop_assert!(ranks.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
