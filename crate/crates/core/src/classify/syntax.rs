//! Code facts from a full Python syntax tree.

use std::collections::BTreeSet;

use rustpython_ast::text_size::TextRange;
use rustpython_ast::{self as ast, Visitor};
use rustpython_parser::Parse;

use super::{CodeFacts, FactsOrigin};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("syntax unparseable at line {line}: {message}")]
pub struct SyntaxUnparseable {
    pub line: usize,
    pub message: String,
}

#[derive(Default)]
struct Scope {
    locals: BTreeSet<String>,
    reads: BTreeSet<String>,
    globals: BTreeSet<String>,
}

struct Collector<'s> {
    source: &'s str,
    line_starts: Vec<usize>,
    facts: CodeFacts,
    /// Nested function/class/comprehension scopes; empty at module level.
    scopes: Vec<Scope>,
}

impl<'s> Collector<'s> {
    fn new(source: &'s str) -> Self {
        let mut line_starts = vec![0];
        line_starts.extend(source.match_indices('\n').map(|(i, _)| i + 1));
        Collector { source, line_starts, facts: CodeFacts::default(), scopes: Vec::new() }
    }

    fn slice(&self, range: TextRange) -> &'s str {
        let start = usize::from(range.start()).min(self.source.len());
        let end = usize::from(range.end()).min(self.source.len());
        self.source.get(start..end).unwrap_or("")
    }

    fn line_of(&self, offset: usize) -> &'s str {
        let idx = self.line_starts.partition_point(|&s| s <= offset).saturating_sub(1);
        let start = self.line_starts[idx];
        let end = self.line_starts.get(idx + 1).map_or(self.source.len(), |e| e - 1);
        &self.source[start..end]
    }

    fn write(&mut self, name: &str) {
        match self.scopes.last_mut() {
            Some(scope) if !scope.globals.contains(name) => {
                scope.locals.insert(name.to_owned());
            }
            _ => {
                self.facts.writes.insert(name.to_owned());
            }
        }
    }

    fn read(&mut self, name: &str) {
        match self.scopes.last_mut() {
            Some(scope) => {
                scope.reads.insert(name.to_owned());
            }
            None => {
                self.facts.reads.insert(name.to_owned());
            }
        }
    }

    fn push(&mut self) {
        self.scopes.push(Scope::default());
    }

    /// Close a scope: free reads propagate outward.
    fn pop(&mut self) {
        let scope = self.scopes.pop().expect("balanced scopes");
        for name in scope.reads.difference(&scope.locals) {
            self.read(name);
        }
    }

    fn bind_arguments(&mut self, args: &ast::Arguments) {
        let all = args.posonlyargs.iter().chain(&args.args).chain(&args.kwonlyargs);
        for a in all {
            self.write(a.def.arg.as_str());
        }
        for a in args.vararg.iter().chain(&args.kwarg) {
            self.write(a.arg.as_str());
        }
    }

    /// Defaults and annotations evaluate in the enclosing scope.
    fn visit_argument_exprs(&mut self, args: &ast::Arguments) {
        let all = args.posonlyargs.iter().chain(&args.args).chain(&args.kwonlyargs);
        for a in all {
            if let Some(d) = &a.default {
                self.visit_expr((**d).clone());
            }
            if let Some(ann) = &a.def.annotation {
                self.visit_expr((**ann).clone());
            }
        }
    }

    fn function(
        &mut self,
        range: TextRange,
        name: &str,
        args: ast::Arguments,
        body: Vec<ast::Stmt>,
        decorators: Vec<ast::Expr>,
        returns: Option<Box<ast::Expr>>,
    ) {
        // header line: first line at or after the range start that holds `def name`
        let start = usize::from(range.start());
        let mut header = self.line_of(start).trim();
        let needle = format!("def {name}");
        if !header.contains(&needle) {
            if let Some(pos) = self.slice(range).find(&needle) {
                header = self.line_of(start + pos).trim();
            }
        }
        self.facts.defs.insert(header.to_owned());
        for d in decorators {
            self.visit_expr(d);
        }
        if let Some(r) = returns {
            self.visit_expr(*r);
        }
        self.visit_argument_exprs(&args);
        self.write(name);
        self.push();
        self.bind_arguments(&args);
        for stmt in body {
            self.visit_stmt(stmt);
        }
        self.pop();
    }

    fn comprehension_scope(&mut self, generators: Vec<ast::Comprehension>, elts: Vec<ast::Expr>) {
        self.push();
        for g in generators {
            self.visit_expr(g.target);
            self.visit_expr(g.iter);
            for cond in g.ifs {
                self.visit_expr(cond);
            }
        }
        for e in elts {
            self.visit_expr(e);
        }
        self.pop();
    }
}

/// `a.b.c` for attribute chains rooted at a name; the trailing attribute
/// alone when the base is not a name.
fn dotted_name(expr: &ast::Expr) -> Option<String> {
    match expr {
        ast::Expr::Name(n) => Some(n.id.to_string()),
        ast::Expr::Attribute(a) => match dotted_name(&a.value) {
            Some(base) if matches!(*a.value, ast::Expr::Name(_) | ast::Expr::Attribute(_)) => {
                Some(format!("{base}.{}", a.attr))
            }
            _ => Some(a.attr.to_string()),
        },
        _ => None,
    }
}

fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl Visitor for Collector<'_> {
    fn visit_stmt_function_def(&mut self, node: ast::StmtFunctionDef) {
        let name = node.name.to_string();
        self.function(node.range, &name, *node.args, node.body, node.decorator_list, node.returns);
    }

    fn visit_stmt_async_function_def(&mut self, node: ast::StmtAsyncFunctionDef) {
        let name = node.name.to_string();
        self.function(node.range, &name, *node.args, node.body, node.decorator_list, node.returns);
    }

    fn visit_stmt_class_def(&mut self, node: ast::StmtClassDef) {
        for e in node.bases.into_iter().chain(node.decorator_list) {
            self.visit_expr(e);
        }
        for k in node.keywords {
            self.visit_expr(k.value);
        }
        self.write(node.name.as_str());
        self.push();
        for stmt in node.body {
            self.visit_stmt(stmt);
        }
        self.pop();
    }

    fn visit_stmt_import(&mut self, node: ast::StmtImport) {
        self.facts.imports.insert(collapse_ws(self.slice(node.range)));
        for alias in node.names {
            match alias.asname {
                Some(asname) => self.write(asname.as_str()),
                None => {
                    let first = alias.name.as_str().split('.').next().unwrap_or_default().to_owned();
                    self.write(&first);
                }
            }
        }
    }

    fn visit_stmt_import_from(&mut self, node: ast::StmtImportFrom) {
        self.facts.imports.insert(collapse_ws(self.slice(node.range)));
        for alias in node.names {
            if alias.name.as_str() == "*" {
                continue;
            }
            let bound = alias.asname.unwrap_or(alias.name);
            self.write(bound.as_str());
        }
    }

    fn visit_stmt_global(&mut self, node: ast::StmtGlobal) {
        if let Some(scope) = self.scopes.last_mut() {
            scope.globals.extend(node.names.iter().map(|n| n.to_string()));
        }
    }

    fn visit_stmt_aug_assign(&mut self, node: ast::StmtAugAssign) {
        if let ast::Expr::Name(n) = node.target.as_ref() {
            self.read(n.id.as_str());
        }
        self.visit_expr(*node.target);
        self.visit_expr(*node.value);
    }

    fn visit_expr_name(&mut self, node: ast::ExprName) {
        match node.ctx {
            ast::ExprContext::Load => self.read(node.id.as_str()),
            ast::ExprContext::Store => self.write(node.id.as_str()),
            ast::ExprContext::Del => self.read(node.id.as_str()),
        }
    }

    fn visit_expr_call(&mut self, node: ast::ExprCall) {
        if let Some(name) = dotted_name(&node.func) {
            self.facts.calls.insert(name);
        }
        self.visit_expr(*node.func);
        for a in node.args {
            self.visit_expr(a);
        }
        for k in node.keywords {
            self.visit_expr(k.value);
        }
    }

    fn visit_expr_lambda(&mut self, node: ast::ExprLambda) {
        self.visit_argument_exprs(&node.args);
        self.push();
        self.bind_arguments(&node.args);
        self.visit_expr(*node.body);
        self.pop();
    }

    fn visit_expr_list_comp(&mut self, node: ast::ExprListComp) {
        self.comprehension_scope(node.generators, vec![*node.elt]);
    }

    fn visit_expr_set_comp(&mut self, node: ast::ExprSetComp) {
        self.comprehension_scope(node.generators, vec![*node.elt]);
    }

    fn visit_expr_generator_exp(&mut self, node: ast::ExprGeneratorExp) {
        self.comprehension_scope(node.generators, vec![*node.elt]);
    }

    fn visit_expr_dict_comp(&mut self, node: ast::ExprDictComp) {
        self.comprehension_scope(node.generators, vec![*node.key, *node.value]);
    }

    fn visit_keyword(&mut self, node: ast::Keyword) {
        self.visit_expr(node.value);
    }

    fn visit_withitem(&mut self, node: ast::WithItem) {
        self.visit_expr(node.context_expr);
        if let Some(v) = node.optional_vars {
            self.visit_expr(*v);
        }
    }

    fn visit_excepthandler_except_handler(&mut self, node: ast::ExceptHandlerExceptHandler) {
        if let Some(t) = node.type_ {
            self.visit_expr(*t);
        }
        if let Some(name) = node.name {
            self.write(name.as_str());
        }
        for stmt in node.body {
            self.visit_stmt(stmt);
        }
    }

    fn visit_match_case(&mut self, node: ast::MatchCase) {
        self.visit_pattern(node.pattern);
        if let Some(g) = node.guard {
            self.visit_expr(*g);
        }
        for stmt in node.body {
            self.visit_stmt(stmt);
        }
    }

    fn visit_pattern_match_as(&mut self, node: ast::PatternMatchAs) {
        if let Some(name) = &node.name {
            self.write(name.as_str());
        }
        if let Some(p) = node.pattern {
            self.visit_pattern(*p);
        }
    }

    fn visit_pattern_match_star(&mut self, node: ast::PatternMatchStar) {
        if let Some(name) = &node.name {
            self.write(name.as_str());
        }
    }

    fn visit_pattern_match_mapping(&mut self, node: ast::PatternMatchMapping) {
        if let Some(rest) = &node.rest {
            self.write(rest.as_str());
        }
        for k in node.keys {
            self.visit_expr(k);
        }
        for p in node.patterns {
            self.visit_pattern(p);
        }
    }
}

/// Build facts from the syntax tree of `source`.
pub fn build_syntax_facts(source: &str) -> Result<CodeFacts, SyntaxUnparseable> {
    let suite = ast::Suite::parse(source, "<unit>").map_err(|e| {
        let offset = usize::from(e.offset).min(source.len());
        SyntaxUnparseable {
            line: source[..offset].matches('\n').count() + 1,
            message: e.error.to_string(),
        }
    })?;
    let mut collector = Collector::new(source);
    for stmt in suite {
        collector.visit_stmt(stmt);
    }
    let mut facts = collector.facts;
    facts.origin = FactsOrigin::Syntax;
    Ok(facts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(items: &[&str]) -> BTreeSet<String> {
        items.iter().map(|s| (*s).to_owned()).collect()
    }

    #[test]
    fn read_csv_assignment() {
        let f = build_syntax_facts("df = pd.read_csv('a.csv')").unwrap();
        assert_eq!(f.writes, set(&["df"]));
        assert_eq!(f.calls, set(&["pd.read_csv"]));
        assert_eq!(f.reads, set(&["pd"]));
    }

    #[test]
    fn empty_source() {
        let f = build_syntax_facts("").unwrap();
        assert!(f.imports.is_empty() && f.defs.is_empty() && f.calls.is_empty());
        assert!(f.reads.is_empty() && f.writes.is_empty());
    }

    #[test]
    fn invalid_grammar() {
        let err = build_syntax_facts("def f(:").unwrap_err();
        assert_eq!(err.line, 1);
    }

    #[test]
    fn function_locals_do_not_leak() {
        let src = "import numpy as np\ndef f(x, scale=k):\n    y = np.sqrt(x) * z\n    return y\nresult = f(3)\n";
        let f = build_syntax_facts(src).unwrap();
        assert_eq!(f.writes, set(&["f", "np", "result"]));
        assert_eq!(f.reads, set(&["f", "k", "np", "z"]));
        assert_eq!(f.defs, set(&["def f(x, scale=k):"]));
        assert_eq!(f.imports, set(&["import numpy as np"]));
        assert!(f.calls.contains("np.sqrt"));
    }

    #[test]
    fn method_header_and_comprehension_scope() {
        let f = build_syntax_facts("class C:\n  def m(self): pass\nvals = [i * w for i in data]\n").unwrap();
        assert!(f.defs.contains("def m(self): pass"));
        assert_eq!(f.writes, set(&["C", "vals"]));
        assert_eq!(f.reads, set(&["data", "w"]));
    }

    #[test]
    fn aug_assign_reads_and_writes() {
        let f = build_syntax_facts("total += step\nwith open(p) as fh:\n    rows = fh.read()\n").unwrap();
        assert!(f.reads.contains("total") && f.writes.contains("total"));
        assert!(f.writes.contains("fh") && f.writes.contains("rows"));
        assert!(f.calls.contains("open") && f.calls.contains("fh.read"));
    }

    #[test]
    fn global_in_function_is_module_write() {
        let f = build_syntax_facts("def setup():\n    global model\n    model = build()\n").unwrap();
        assert!(f.writes.contains("model"));
        assert!(f.reads.contains("build"));
    }

    #[test]
    fn from_import_binds_names() {
        let f = build_syntax_facts("from sklearn.linear_model import (\n    LogisticRegression as LR,\n    Ridge)\n").unwrap();
        assert_eq!(f.writes, set(&["LR", "Ridge"]));
        assert_eq!(f.imports.len(), 1);
    }
}
