//! External analysis: a makefile subset turned into a task graph.
//!
//! Grammar, one construct per line:
//!
//! ```text
//! target: dep dep ...
//! <TAB>command            (an optional leading '@' is accepted)
//! #@store <target> input=<path> [output=<path>] layout=<layout> [records=<n>]
//! #@merge <target> put-together | reiterate | cmd:<command>
//! #@size <target> <bytes>
//! # comment
//! ```
//!
//! The first rule's target is the root. Dependencies without a rule are
//! terminal file nodes. A dependency shared by several targets is one node
//! and runs once.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::record_server::{LayoutSpec, MergePolicy, StoreConfig};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TaskmapError {
    #[error("makefile line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("makefile line {line}: target `{target}` defined twice")]
    DuplicateTarget { target: String, line: usize },
    #[error("dependency cycle: {}", .0.join(" -> "))]
    CycleDetected(Vec<String>),
    #[error("makefile has no rules")]
    MissingRoot,
    #[error("annotation on line {line} names unknown target `{target}`")]
    AnnotationUnknownTarget { target: String, line: usize },
}

/// How the outputs of a replicated node combine.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MergeMode {
    /// Each element is touched once; parts are put together.
    #[default]
    PutTogether,
    /// The node needs all data elements; merged parts go through another
    /// iteration of the node.
    ReIterate,
    /// A user-supplied merge command.
    UserCommand(String),
}

impl MergeMode {
    pub fn policy(&self) -> MergePolicy {
        match self {
            MergeMode::UserCommand(cmd) => MergePolicy::UserCommand(cmd.clone()),
            _ => MergePolicy::Concatenate,
        }
    }
}

impl fmt::Display for MergeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MergeMode::PutTogether => f.write_str("put-together"),
            MergeMode::ReIterate => f.write_str("reiterate"),
            MergeMode::UserCommand(cmd) => write!(f, "cmd:{cmd}"),
        }
    }
}

/// A data storage declared on a target.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreDecl {
    pub input: PathBuf,
    pub output: Option<PathBuf>,
    pub layout: LayoutSpec,
    /// Record count, when known ahead of time.
    pub records: Option<u64>,
}

impl StoreDecl {
    pub fn store_config(&self) -> StoreConfig {
        let mut cfg = StoreConfig::new(self.input.clone(), self.layout.clone());
        cfg.output_path = self.output.clone();
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AnnotationKind {
    Store(StoreDecl),
    Merge(MergeMode),
    Size(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Annotation {
    pub target: String,
    pub kind: AnnotationKind,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub target: String,
    pub deps: Vec<String>,
    /// Command lines without the leading tab.
    pub commands: Vec<String>,
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MakefileSpec {
    pub rules: Vec<Rule>,
    pub annotations: Vec<Annotation>,
}

fn parse_store(target_line: usize, words: &[&str]) -> Result<StoreDecl, TaskmapError> {
    let err = |reason: String| TaskmapError::Parse { line: target_line, reason };
    let (mut input, mut output, mut layout, mut records) = (None, None, None, None);
    for w in words {
        let (k, v) = w.split_once('=').ok_or_else(|| err(format!("expected key=value, got `{w}`")))?;
        match k {
            "input" => input = Some(PathBuf::from(v)),
            "output" => output = Some(PathBuf::from(v)),
            "layout" => layout = Some(v.parse::<LayoutSpec>().map_err(|e| err(e.to_string()))?),
            "records" => records = Some(v.parse::<u64>().map_err(|_| err(format!("records `{v}` is not a count")))?),
            _ => return Err(err(format!("unknown store key `{k}`"))),
        }
    }
    Ok(StoreDecl {
        input: input.ok_or_else(|| err("store needs input=".into()))?,
        output,
        layout: layout.ok_or_else(|| err("store needs layout=".into()))?,
        records,
    })
}

fn parse_annotation(line: usize, body: &str) -> Result<Annotation, TaskmapError> {
    let err = |reason: String| TaskmapError::Parse { line, reason };
    let words: Vec<&str> = body.split_whitespace().collect();
    let (directive, target) = match words.as_slice() {
        [d, t, ..] => (*d, t.to_string()),
        _ => return Err(err("annotation needs a directive and a target".into())),
    };
    let rest = &words[2..];
    let kind = match directive {
        "store" => AnnotationKind::Store(parse_store(line, rest)?),
        "merge" => {
            let mode = body.splitn(3, char::is_whitespace).nth(2).map(str::trim).unwrap_or("");
            AnnotationKind::Merge(match mode {
                "put-together" => MergeMode::PutTogether,
                "reiterate" => MergeMode::ReIterate,
                m => match m.strip_prefix("cmd:") {
                    Some(cmd) if !cmd.trim().is_empty() => MergeMode::UserCommand(cmd.trim().to_string()),
                    _ => return Err(err(format!("unknown merge mode `{m}`"))),
                },
            })
        }
        "size" => match rest {
            [n] => AnnotationKind::Size(n.parse().map_err(|_| err(format!("size `{n}` is not a byte count")))?),
            _ => return Err(err("size takes one byte count".into())),
        },
        d => return Err(err(format!("unknown annotation `{d}`"))),
    };
    Ok(Annotation { target, kind, line })
}

pub fn parse_makefile(text: &str) -> Result<MakefileSpec, TaskmapError> {
    let mut spec = MakefileSpec::default();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut current: Option<usize> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |reason: &str| TaskmapError::Parse { line, reason: reason.to_string() };
        if let Some(cmd) = raw.strip_prefix('\t') {
            let rule = current.ok_or_else(|| err("command line outside a rule"))?;
            let cmd = cmd.trim();
            if !cmd.is_empty() {
                spec.rules[rule].commands.push(cmd.to_string());
            }
            continue;
        }
        if raw.trim().is_empty() {
            continue;
        }
        if raw.starts_with(char::is_whitespace) {
            return Err(err("command lines must start with a tab"));
        }
        if let Some(body) = raw.strip_prefix("#@") {
            spec.annotations.push(parse_annotation(line, body)?);
            continue;
        }
        if raw.starts_with('#') {
            continue;
        }
        let (target, deps) = raw.split_once(':').ok_or_else(|| err("expected `target: deps`"))?;
        let target = target.trim();
        if target.is_empty() || target.contains(char::is_whitespace) {
            return Err(err("a rule names exactly one target"));
        }
        if deps.contains(['=', '%', '$']) || target.contains(['=', '%', '$']) {
            return Err(err("variables and pattern rules are not supported"));
        }
        if seen.insert(target.to_string(), line).is_some() {
            return Err(TaskmapError::DuplicateTarget { target: target.to_string(), line });
        }
        spec.rules.push(Rule {
            target: target.to_string(),
            deps: deps.split_whitespace().map(str::to_string).collect(),
            commands: Vec::new(),
            line,
        });
        current = Some(spec.rules.len() - 1);
    }
    Ok(spec)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskNode {
    pub name: String,
    pub commands: Vec<String>,
    /// Indices of the direct dependencies.
    pub children: Vec<usize>,
    /// 1 runs first; every node outranks its ancestors.
    pub priority: u32,
    /// No rule defines this node: it is a plain file.
    pub terminal: bool,
    pub replica_eligible: bool,
    pub data_storage: Option<StoreDecl>,
    pub size_hint: u64,
    pub merge_mode: MergeMode,
}

impl TaskNode {
    /// The node runs something when allocated.
    pub fn is_task(&self) -> bool {
        !self.commands.is_empty()
    }
}

/// The dependency graph. Node 0 is the root; the remaining nodes follow in
/// first-reached order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskTree {
    nodes: Vec<TaskNode>,
    #[serde(skip)]
    by_name: BTreeMap<String, usize>,
}

impl TaskTree {
    pub fn root(&self) -> &TaskNode {
        &self.nodes[0]
    }

    pub fn nodes(&self) -> &[TaskNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn node(&self, name: &str) -> Option<&TaskNode> {
        self.index(name).map(|i| &self.nodes[i])
    }

    pub fn children(&self, name: &str) -> Vec<&str> {
        self.node(name).map(|n| n.children.iter().map(|&c| self.nodes[c].name.as_str()).collect()).unwrap_or_default()
    }

    /// Every node reachable below `idx`.
    pub fn descendants(&self, idx: usize) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        let mut stack = self.nodes[idx].children.clone();
        while let Some(n) = stack.pop() {
            if out.insert(n) {
                stack.extend(&self.nodes[n].children);
            }
        }
        out
    }

    /// `a` is a proper ancestor of `b`.
    pub fn is_ancestor(&self, a: &str, b: &str) -> bool {
        match (self.index(a), self.index(b)) {
            (Some(a), Some(b)) => self.descendants(a).contains(&b),
            _ => false,
        }
    }

    /// Node names in ascending priority, ties in index order.
    pub fn by_priority(&self) -> Vec<&str> {
        let mut idx: Vec<usize> = (0..self.nodes.len()).collect();
        idx.sort_by_key(|&i| (self.nodes[i].priority, i));
        idx.into_iter().map(|i| self.nodes[i].name.as_str()).collect()
    }
}

/// Builds the graph under the first rule's target and assigns priorities
/// from the longest root path: `priority = max_depth - depth + 1`.
pub fn build_tree(spec: &MakefileSpec) -> Result<TaskTree, TaskmapError> {
    let root = spec.rules.first().ok_or(TaskmapError::MissingRoot)?;
    let rules: HashMap<&str, &Rule> = spec.rules.iter().map(|r| (r.target.as_str(), r)).collect();

    let mut nodes: Vec<TaskNode> = Vec::new();
    let mut by_name: BTreeMap<String, usize> = BTreeMap::new();
    let mut intern = |name: &str, nodes: &mut Vec<TaskNode>| -> (usize, bool) {
        if let Some(&i) = by_name.get(name) {
            return (i, false);
        }
        let rule = rules.get(name);
        nodes.push(TaskNode {
            name: name.to_string(),
            commands: rule.map(|r| r.commands.clone()).unwrap_or_default(),
            children: Vec::new(),
            priority: 0,
            terminal: rule.is_none(),
            replica_eligible: false,
            data_storage: None,
            size_hint: 0,
            merge_mode: MergeMode::default(),
        });
        by_name.insert(name.to_string(), nodes.len() - 1);
        (nodes.len() - 1, true)
    };

    // Depth-first construction with an explicit stack; grey nodes are on
    // the current path.
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Grey,
        Black,
    }
    let mut marks: Vec<Mark> = Vec::new();
    let mut post_order: Vec<usize> = Vec::new();
    let (r, _) = intern(&root.target, &mut nodes);
    marks.push(Mark::Grey);
    let mut stack: Vec<(usize, usize)> = vec![(r, 0)];
    while let Some(top) = stack.last_mut() {
        let (node, next) = *top;
        let deps: &[String] = rules.get(nodes[node].name.as_str()).map(|r| r.deps.as_slice()).unwrap_or(&[]);
        if next == deps.len() {
            marks[node] = Mark::Black;
            post_order.push(node);
            stack.pop();
            continue;
        }
        top.1 += 1;
        let dep = deps[next].clone();
        let (child, fresh) = intern(&dep, &mut nodes);
        if !nodes[node].children.contains(&child) {
            nodes[node].children.push(child);
        }
        if fresh {
            marks.push(Mark::Grey);
            stack.push((child, 0));
        } else if marks[child] == Mark::Grey {
            let start = stack.iter().position(|(n, _)| *n == child).expect("grey node is on the stack");
            let mut cycle: Vec<String> = stack[start..].iter().map(|(n, _)| nodes[*n].name.clone()).collect();
            cycle.push(nodes[child].name.clone());
            return Err(TaskmapError::CycleDetected(cycle));
        }
    }

    // Longest path from the root, relaxed in reverse post-order.
    let mut depth = vec![0u32; nodes.len()];
    for &n in post_order.iter().rev() {
        for &c in &nodes[n].children {
            depth[c] = depth[c].max(depth[n] + 1);
        }
    }
    let max_depth = depth.iter().copied().max().unwrap_or(0);
    for (n, d) in nodes.iter_mut().zip(&depth) {
        n.priority = max_depth - d + 1;
    }
    Ok(TaskTree { nodes, by_name })
}

/// Applies the store, merge and size annotations.
pub fn mark_replicable(mut tree: TaskTree, annotations: &[Annotation]) -> Result<TaskTree, TaskmapError> {
    for a in annotations {
        let idx = tree
            .index(&a.target)
            .ok_or_else(|| TaskmapError::AnnotationUnknownTarget { target: a.target.clone(), line: a.line })?;
        let node = &mut tree.nodes[idx];
        match &a.kind {
            AnnotationKind::Store(decl) => {
                node.data_storage = Some(decl.clone());
                node.replica_eligible = true;
            }
            AnnotationKind::Merge(mode) => node.merge_mode = mode.clone(),
            AnnotationKind::Size(bytes) => node.size_hint = *bytes,
        }
    }
    Ok(tree)
}

/// Parses, builds and annotates in one step.
pub fn analyze(text: &str) -> Result<TaskTree, TaskmapError> {
    let spec = parse_makefile(text)?;
    mark_replicable(build_tree(&spec)?, &spec.annotations)
}

/// Nodes not yet completed whose every descendant is completed.
pub fn runnable_set(tree: &TaskTree, completed: &BTreeSet<String>) -> BTreeSet<String> {
    (0..tree.len())
        .filter(|&i| !completed.contains(&tree.nodes[i].name))
        .filter(|&i| tree.descendants(i).iter().all(|&d| completed.contains(&tree.nodes[d].name)))
        .map(|i| tree.nodes[i].name.clone())
        .collect()
}

/// Human-readable summary of the graph, one node per line in priority order.
pub fn render(tree: &TaskTree) -> String {
    let mut out = String::new();
    for name in tree.by_priority() {
        let n = tree.node(name).expect("listed node");
        let kids = tree.children(name).join(" ");
        let kind = if n.terminal { "file" } else if n.is_task() { "task" } else { "target" };
        out.push_str(&format!("{} priority={} {kind}", n.name, n.priority));
        if !kids.is_empty() {
            out.push_str(&format!(" deps=[{kids}]"));
        }
        if n.replica_eligible {
            out.push_str(&format!(" replicable merge={}", n.merge_mode));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SORT_MAKEFILE: &str = "all: main\n\nmain: run1 run2\n\t@echo \"Deployment is done.\"\n\nexec: sch.c\n\t@gcc sch.c -o sch\n\nrun1: exec\n\t./sch largefile\n\nrun2: exec\n\t./sch file1 file2 file3\n";

    fn set(names: &[&str]) -> BTreeSet<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parses_sort_makefile() {
        let spec = parse_makefile(SORT_MAKEFILE).unwrap();
        let rules: Vec<(&str, Vec<&str>)> =
            spec.rules.iter().map(|r| (r.target.as_str(), r.deps.iter().map(String::as_str).collect())).collect();
        assert_eq!(
            rules,
            vec![
                ("all", vec!["main"]),
                ("main", vec!["run1", "run2"]),
                ("exec", vec!["sch.c"]),
                ("run1", vec!["exec"]),
                ("run2", vec!["exec"]),
            ]
        );
        assert_eq!(spec.rules[2].commands, vec!["@gcc sch.c -o sch"]);
    }

    #[test]
    fn parse_accepts_cycles_syntactically() {
        assert_eq!(parse_makefile("a: b\nb: a\n").unwrap().rules.len(), 2);
    }

    #[test]
    fn command_without_tab_is_rejected() {
        let err = parse_makefile("all: x\n    echo hi\n").unwrap_err();
        assert_eq!(err, TaskmapError::Parse { line: 2, reason: "command lines must start with a tab".into() });
        assert!(matches!(parse_makefile("\techo\n"), Err(TaskmapError::Parse { line: 1, .. })));
        assert!(matches!(parse_makefile("a: b\na: c\n"), Err(TaskmapError::DuplicateTarget { line: 2, .. })));
        assert!(parse_makefile("CC = gcc\n").is_err());
    }

    #[test]
    fn sort_tree_priorities() {
        let tree = build_tree(&parse_makefile(SORT_MAKEFILE).unwrap()).unwrap();
        assert_eq!(tree.root().name, "all");
        assert_eq!(tree.children("main"), vec!["run1", "run2"]);
        assert_eq!(tree.children("run1"), vec!["exec"]);
        assert_eq!(tree.children("run2"), vec!["exec"]);
        assert_eq!(tree.children("exec"), vec!["sch.c"]);
        let p = |n: &str| tree.node(n).unwrap().priority;
        assert_eq!((p("sch.c"), p("exec"), p("run1"), p("run2"), p("main"), p("all")), (1, 2, 3, 3, 4, 5));
        assert!(tree.node("sch.c").unwrap().terminal);
        // exec is shared but appears once
        assert_eq!(tree.len(), 6);
    }

    #[test]
    fn minimal_and_cyclic_trees() {
        let tree = build_tree(&parse_makefile("all: x\n").unwrap()).unwrap();
        assert_eq!(tree.by_priority(), vec!["x", "all"]);
        let err = build_tree(&parse_makefile("a: b\nb: a\n").unwrap()).unwrap_err();
        assert_eq!(err, TaskmapError::CycleDetected(vec!["a".into(), "b".into(), "a".into()]));
        assert_eq!(build_tree(&MakefileSpec::default()).unwrap_err(), TaskmapError::MissingRoot);
        assert!(matches!(build_tree(&parse_makefile("a: a\n").unwrap()), Err(TaskmapError::CycleDetected(_))));
    }

    #[test]
    fn runnable_sets_follow_leaves_first() {
        let tree = build_tree(&parse_makefile(SORT_MAKEFILE).unwrap()).unwrap();
        assert_eq!(runnable_set(&tree, &set(&[])), set(&["sch.c"]));
        assert_eq!(runnable_set(&tree, &set(&["sch.c", "exec"])), set(&["run1", "run2"]));
        assert_eq!(runnable_set(&tree, &set(&["sch.c", "exec", "run1", "run2"])), set(&["main"]));
    }

    #[test]
    fn annotations_mark_nodes() {
        let text = format!(
            "{SORT_MAKEFILE}#@store exec input=largefile layout=fixed:4 records=200\n#@merge run1 cmd:sort -m\n#@merge exec put-together\n#@size run2 4096\n"
        );
        let tree = analyze(&text).unwrap();
        let exec = tree.node("exec").unwrap();
        assert!(exec.replica_eligible);
        assert_eq!(exec.merge_mode, MergeMode::PutTogether);
        assert_eq!(exec.data_storage.as_ref().unwrap().records, Some(200));
        assert_eq!(tree.node("run1").unwrap().merge_mode, MergeMode::UserCommand("sort -m".into()));
        assert_eq!(tree.node("run1").unwrap().merge_mode.policy(), MergePolicy::UserCommand("sort -m".into()));
        assert!(!tree.node("run1").unwrap().replica_eligible);
        assert_eq!(tree.node("run2").unwrap().size_hint, 4096);

        let sorted = analyze("all: sort\nsort:\n\tsort data\n#@store sort input=data layout=delim:0a\n#@merge sort reiterate\n").unwrap();
        assert_eq!(sorted.node("sort").unwrap().merge_mode, MergeMode::ReIterate);

        let err = analyze("all: x\n#@size y 3\n").unwrap_err();
        assert_eq!(err, TaskmapError::AnnotationUnknownTarget { target: "y".into(), line: 2 });
        assert!(analyze("all: x\n#@store x layout=fixed:4\n").is_err());
        assert!(analyze("all: x\n#@merge x shuffle\n").is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        /// A random DAG over `n` nodes; node i only depends on higher ids.
        fn dag() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
            (2usize..=12).prop_flat_map(|n| {
                let pairs: Vec<(usize, usize)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
                let len = pairs.len();
                (Just(n), proptest::sample::subsequence(pairs, 0..=len))
            })
        }

        fn makefile(n: usize, edges: &[(usize, usize)]) -> String {
            // Root depends on every node so all are reachable.
            let mut text = format!("root: {}\n", (0..n).map(|i| format!("t{i}")).collect::<Vec<_>>().join(" "));
            for i in 0..n {
                let deps: Vec<String> = edges.iter().filter(|(a, _)| *a == i).map(|(_, b)| format!("t{b}")).collect();
                text.push_str(&format!("t{i}: {}\n\tdo {i}\n", deps.join(" ")));
            }
            text
        }

        proptest! {
            #[test]
            fn runnable_execution_is_topological((n, edges) in dag(), picks in proptest::collection::vec(any::<proptest::sample::Index>(), 64)) {
                let tree = build_tree(&parse_makefile(&makefile(n, &edges)).unwrap()).unwrap();
                let mut done = BTreeSet::new();
                let mut order = Vec::new();
                let mut pick = picks.into_iter().cycle();
                while done.len() < tree.len() {
                    let ready: Vec<String> = runnable_set(&tree, &done).into_iter().collect();
                    prop_assert!(!ready.is_empty());
                    for a in &ready {
                        for b in &ready {
                            prop_assert!(!tree.is_ancestor(a, b), "{} and its descendant {} both runnable", a, b);
                        }
                    }
                    let chosen = ready[pick.next().unwrap().index(ready.len())].clone();
                    done.insert(chosen.clone());
                    order.push(chosen);
                }
                // Oracle: every declared edge target -> dependency has the
                // dependency first.
                let pos = |s: &str| order.iter().position(|o| o == s).unwrap();
                for (a, b) in &edges {
                    let (dep, target) = (pos(&format!("t{b}")), pos(&format!("t{a}")));
                    prop_assert!(dep < target);
                }
                prop_assert_eq!(order.last().unwrap(), "root");
                // Priorities agree with the dependency order.
                for (a, b) in &edges {
                    let pa = tree.node(&format!("t{a}")).unwrap().priority;
                    let pb = tree.node(&format!("t{b}")).unwrap().priority;
                    prop_assert!(pb < pa);
                }
            }
        }
    }
}
