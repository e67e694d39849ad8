use std::collections::BTreeMap;

use super::{derive_cell_id, Cell, CellKind, NotebookDoc};

/// One top-level block of a script: a definition (with its decorators) or a
/// run of statements not separated by blank lines.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptBlock {
    /// `Some(name)` for `def`/`class` blocks.
    pub def_name: Option<String>,
    /// 1-based inclusive line span.
    pub start_line: usize,
    pub end_line: usize,
    pub text: String,
}

#[derive(Default, Clone, Copy)]
struct LexState {
    depth: usize,
    /// Open triple-quoted string delimiter.
    triple: Option<char>,
    backslash: bool,
}

impl LexState {
    fn continues(&self) -> bool {
        self.depth > 0 || self.triple.is_some() || self.backslash
    }

    fn feed(&mut self, line: &str) {
        self.backslash = false;
        let chars: Vec<char> = line.chars().collect();
        let mut i = 0;
        while i < chars.len() {
            let c = chars[i];
            if let Some(q) = self.triple {
                if c == '\\' {
                    i += 2;
                    continue;
                }
                if c == q && chars.get(i + 1) == Some(&q) && chars.get(i + 2) == Some(&q) {
                    self.triple = None;
                    i += 3;
                    continue;
                }
                i += 1;
                continue;
            }
            match c {
                '#' => return,
                '\'' | '"' => {
                    if chars.get(i + 1) == Some(&c) && chars.get(i + 2) == Some(&c) {
                        self.triple = Some(c);
                        i += 3;
                        continue;
                    }
                    // single-line string; an unterminated one ends at line end
                    i += 1;
                    while i < chars.len() && chars[i] != c {
                        if chars[i] == '\\' {
                            i += 1;
                        }
                        i += 1;
                    }
                    i += 1;
                    continue;
                }
                '(' | '[' | '{' => self.depth += 1,
                ')' | ']' | '}' => self.depth = self.depth.saturating_sub(1),
                '\\' if i + 1 == chars.len() => self.backslash = true,
                _ => {}
            }
            i += 1;
        }
    }
}

fn def_name(line: &str) -> Option<String> {
    let rest = line
        .strip_prefix("async def ")
        .or_else(|| line.strip_prefix("def "))
        .or_else(|| line.strip_prefix("class "))?;
    let name: String = rest
        .trim_start()
        .chars()
        .take_while(|c| c.is_alphanumeric() || *c == '_')
        .collect();
    (!name.is_empty()).then_some(name)
}

/// Split source text into top-level blocks.
pub fn segment_script(text: &str) -> Vec<ScriptBlock> {
    struct Open {
        def_name: Option<String>,
        is_def: bool,
        start: usize,
        lines: Vec<String>,
    }
    let mut blocks = Vec::new();
    let mut current: Option<Open> = None;
    let mut pending_blank: Vec<String> = Vec::new();
    let mut lex = LexState::default();

    let close = |open: Open, blocks: &mut Vec<ScriptBlock>| {
        let end = open.start + open.lines.len() - 1;
        blocks.push(ScriptBlock {
            def_name: open.def_name,
            start_line: open.start,
            end_line: end,
            text: open.lines.join("\n"),
        });
    };

    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let continuation = lex.continues();
        lex.feed(line);
        if !continuation && line.trim().is_empty() {
            pending_blank.push(line.to_owned());
            continue;
        }
        let top_level = !continuation && !line.starts_with([' ', '\t']);
        if !top_level {
            // body or continuation line: extends the current block
            match current.as_mut() {
                Some(open) => {
                    open.lines.append(&mut pending_blank);
                    open.lines.push(line.to_owned());
                }
                None => {
                    pending_blank.clear();
                    current = Some(Open { def_name: None, is_def: false, start: lineno, lines: vec![line.to_owned()] });
                }
            }
            continue;
        }

        let decorator = line.starts_with('@');
        let name = def_name(line);
        let starts_def = decorator || name.is_some();
        let extend = match current.as_mut() {
            // decorators glue onto the definition they precede
            Some(open) if open.is_def && open.def_name.is_none() && pending_blank.is_empty() => {
                if name.is_some() {
                    open.def_name = name.clone();
                }
                starts_def
            }
            Some(open) => !starts_def && !open.is_def && pending_blank.is_empty(),
            None => false,
        };
        pending_blank.clear();
        if extend {
            current.as_mut().expect("checked above").lines.push(line.to_owned());
        } else {
            if let Some(open) = current.take() {
                close(open, &mut blocks);
            }
            current = Some(Open { def_name: name, is_def: starts_def, start: lineno, lines: vec![line.to_owned()] });
        }
    }
    if let Some(open) = current.take() {
        close(open, &mut blocks);
    }
    blocks
}

/// Script text as a document with one synthetic code cell per block.
pub fn parse_script_str(text: &str, source_path: &str) -> NotebookDoc {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    let cells = segment_script(text)
        .into_iter()
        .enumerate()
        .map(|(pos, block)| {
            let base = match &block.def_name {
                Some(name) => format!("def-{name}"),
                None => derive_cell_id(pos, CellKind::Code, &block.text),
            };
            let n = seen.entry(base.clone()).or_insert(0);
            *n += 1;
            let id = if *n == 1 { base } else { format!("{base}-{n}") };
            let mut cell = Cell::synthetic(id, block.text);
            cell.cell_metadata.insert("start_line".into(), block.start_line.into());
            cell.cell_metadata.insert("end_line".into(), block.end_line.into());
            cell
        })
        .collect();
    NotebookDoc {
        cells,
        notebook_metadata: BTreeMap::new(),
        source_path: source_path.to_owned(),
        format_version: "script".to_owned(),
        extra: BTreeMap::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent count: a block starts at every top-level line that is a
    /// definition header, or a plain statement following a blank line or a
    /// definition body. Only valid for fixtures without multi-line strings.
    fn brute_force_block_count(text: &str) -> usize {
        let mut count = 0;
        let mut prev_blank = true;
        let mut in_def = false;
        let mut prev_decorator = false;
        for line in text.lines() {
            if line.trim().is_empty() {
                prev_blank = true;
                continue;
            }
            if line.starts_with(' ') || line.starts_with('\t') {
                prev_blank = false;
                continue;
            }
            let is_def = line.starts_with("def ") || line.starts_with("class ") || line.starts_with('@');
            if is_def {
                if !prev_decorator {
                    count += 1;
                }
                in_def = true;
            } else if prev_blank || in_def {
                count += 1;
                in_def = false;
            }
            prev_decorator = line.starts_with('@');
            prev_blank = false;
        }
        count
    }

    const TWO_DEFS_AND_CALL: &str = "import math\n\ndef area(r):\n    return math.pi * r ** 2\n\n\ndef scale(x, k=2):\n    y = x * k\n\n    return y\n\nprint(scale(area(1.0)))\n";

    #[test]
    fn two_defs_and_trailing_call() {
        let script = "def area(r):\n    return 3.14 * r * r\n\ndef scale(x):\n    return 2 * x\n\nprint(scale(area(1.0)))\n";
        let doc = parse_script_str(script, "s.py");
        assert_eq!(doc.cells.len(), brute_force_block_count(script));
        assert_eq!(doc.cells.len(), 3);
        assert_eq!(doc.cells[0].cell_id, "def-area");
        assert_eq!(doc.cells[1].cell_id, "def-scale");
        assert!(doc.cells.iter().all(|c| c.execution_count.is_none()));
    }

    #[test]
    fn blank_lines_inside_bodies_stay_in_the_def() {
        let blocks = segment_script(TWO_DEFS_AND_CALL);
        assert_eq!(blocks.len(), brute_force_block_count(TWO_DEFS_AND_CALL));
        assert_eq!(blocks[2].text, "def scale(x, k=2):\n    y = x * k\n\n    return y");
        assert_eq!((blocks[2].start_line, blocks[2].end_line), (7, 10));
        assert_eq!(blocks[3].text, "print(scale(area(1.0)))");
    }

    #[test]
    fn empty_and_single_expression() {
        assert!(parse_script_str("", "e.py").cells.is_empty());
        assert!(parse_script_str("\n\n  \n", "e.py").cells.is_empty());
        assert_eq!(parse_script_str("1 + 2\n", "one.py").cells.len(), 1);
    }

    #[test]
    fn decorators_and_multiline_constructs() {
        let src = "@cache\n@other(1)\ndef f():\n    return 1\nx = [\n1,\n\n2]\ns = \"\"\"\ndef not_a_def():\n\"\"\"\n";
        let blocks = segment_script(src);
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].def_name.as_deref(), Some("f"));
        assert_eq!(blocks[0].start_line, 1);
        assert_eq!(blocks[1].start_line, 5);
        assert_eq!(blocks[1].end_line, 11);
    }

    #[test]
    fn statement_runs_split_on_blank_lines() {
        let src = "a = 1\nb = 2\n\nc = 3\n";
        let blocks = segment_script(src);
        assert_eq!(blocks.len(), brute_force_block_count(src));
        assert_eq!(blocks[0].text, "a = 1\nb = 2");
    }
}
