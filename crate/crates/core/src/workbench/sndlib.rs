//! Reader for the NODES and LINKS sections of SNDlib's native text format.
//!
//! ```text
//! NODES (
//!   Berlin ( 13.48 52.52 )
//! )
//! LINKS (
//!   L1 ( Berlin Hamburg ) 0.00 0.00 0.00 0.00 ( 40.00 3290.00 160.00 4370.00 )
//! )
//! ```
//!
//! A link's capacity is its first module capacity, or the pre-installed
//! capacity when it lists no modules. META, DEMANDS and ADMISSIBLE_PATHS
//! are skipped.

use std::collections::HashSet;

use super::topology::{LinkEntry, NodeSpec, TopologySpec};
use super::WorkbenchError;

const SKIPPED: [&str; 3] = ["META", "DEMANDS", "ADMISSIBLE_PATHS"];

enum Section {
    None,
    Nodes,
    Links,
    /// Parenthesis depth inside an ignored section.
    Skip(usize),
}

fn tokens(line: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        if c.is_whitespace() || c == '(' || c == ')' {
            if let Some(s) = start.take() {
                out.push(&line[s..i]);
            }
            if c == '(' || c == ')' {
                out.push(&line[i..i + 1]);
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push(&line[s..]);
    }
    out
}

fn syntax(line: usize, message: impl Into<String>) -> WorkbenchError {
    WorkbenchError::Syntax {
        line,
        message: message.into(),
    }
}

fn number(tok: Option<&&str>, line: usize, what: &str) -> Result<f64, WorkbenchError> {
    let t = tok.ok_or_else(|| syntax(line, format!("missing {what}")))?;
    t.parse()
        .map_err(|_| syntax(line, format!("{what}: expected a number, got {t:?}")))
}

/// Parses SNDlib native text into an undirected topology named `name`
/// (overridden by a `# network NAME` header line when present).
pub fn parse_sndlib_native(text: &str, name: &str) -> Result<TopologySpec, WorkbenchError> {
    let mut spec = TopologySpec {
        name: name.to_string(),
        nodes: Vec::new(),
        links: Vec::new(),
    };
    let mut node_ids = HashSet::new();
    let mut pairs = HashSet::new();
    let mut section = Section::None;
    let mut saw_nodes = false;
    let mut saw_links = false;
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        if let Some(rest) = raw.trim_start().strip_prefix("# network ") {
            if !rest.trim().is_empty() {
                spec.name = rest.trim().to_string();
            }
        }
        let line = raw.split('#').next().unwrap_or("");
        if line.trim_start().starts_with('?') {
            continue;
        }
        let toks = tokens(line);
        if toks.is_empty() {
            continue;
        }
        match &mut section {
            Section::Skip(depth) => {
                for t in &toks {
                    match *t {
                        "(" => *depth += 1,
                        ")" => *depth -= 1,
                        _ => {}
                    }
                }
                if *depth == 0 {
                    section = Section::None;
                }
            }
            Section::None => {
                if toks.len() != 2 || toks[1] != "(" {
                    return Err(syntax(lineno, format!("expected a section header, got {:?}", line.trim())));
                }
                section = match toks[0] {
                    "NODES" => {
                        saw_nodes = true;
                        Section::Nodes
                    }
                    "LINKS" => {
                        saw_links = true;
                        Section::Links
                    }
                    s if SKIPPED.contains(&s) => Section::Skip(1),
                    s => return Err(WorkbenchError::UnsupportedFeature(format!("section {s}"))),
                };
            }
            Section::Nodes => {
                if toks == [")"] {
                    section = Section::None;
                    continue;
                }
                let id = toks[0];
                let ok = toks.len() == 1
                    || (toks.len() == 5 && toks[1] == "(" && toks[4] == ")")
                    || (toks.len() == 4 && toks[1] == "(" && toks[3] == ")");
                if !ok || id == "(" || id == ")" {
                    return Err(syntax(lineno, format!("malformed node line {:?}", line.trim())));
                }
                if !node_ids.insert(id.to_string()) {
                    return Err(syntax(lineno, format!("duplicate node {id:?}")));
                }
                spec.nodes.push(NodeSpec {
                    id: id.to_string(),
                    label: None,
                });
            }
            Section::Links => {
                if toks == [")"] {
                    section = Section::None;
                    continue;
                }
                spec.links.push(link_line(&toks, lineno, &node_ids, &mut pairs)?);
            }
        }
    }
    match section {
        Section::None => {}
        _ => return Err(syntax(text.lines().count(), "unterminated section")),
    }
    if !saw_nodes || !saw_links {
        return Err(syntax(text.lines().count(), "missing NODES or LINKS section"));
    }
    spec.validate()?;
    Ok(spec)
}

fn link_line(
    toks: &[&str],
    line: usize,
    nodes: &HashSet<String>,
    pairs: &mut HashSet<(String, String)>,
) -> Result<LinkEntry, WorkbenchError> {
    // id ( a b ) preinstalled_cap preinstalled_cost routing_cost setup_cost ( modules )
    if toks.len() < 11 || toks[1] != "(" || toks[4] != ")" || toks[9] != "(" || toks.last() != Some(&")") {
        return Err(syntax(line, format!("malformed link line: {}", toks.join(" "))));
    }
    let (a, b) = (toks[2], toks[3]);
    for end in [a, b] {
        if !nodes.contains(end) {
            return Err(WorkbenchError::BadReference(format!(
                "line {line}: link {} references unknown node {end:?}",
                toks[0]
            )));
        }
    }
    if a == b {
        return Err(syntax(line, format!("link {} is a self-loop", toks[0])));
    }
    let key = if a < b { (a.to_string(), b.to_string()) } else { (b.to_string(), a.to_string()) };
    if !pairs.insert(key) {
        return Err(WorkbenchError::UnsupportedFeature(format!(
            "parallel links between {a} and {b} (line {line})"
        )));
    }
    let preinstalled = number(toks.get(5), line, "pre-installed capacity")?;
    for (k, what) in [(6, "pre-installed cost"), (7, "routing cost"), (8, "setup cost")] {
        number(toks.get(k), line, what)?;
    }
    let modules = &toks[10..toks.len() - 1];
    if modules.len() % 2 != 0 {
        return Err(syntax(line, "module list needs capacity/cost pairs"));
    }
    for m in modules {
        m.parse::<f64>()
            .map_err(|_| syntax(line, format!("module field: expected a number, got {m:?}")))?;
    }
    let capacity = match modules.first() {
        Some(c) => c.parse().expect("checked"),
        None => preinstalled,
    };
    if !(capacity > 0.0) {
        return Err(syntax(line, format!("link {} has no positive capacity", toks[0])));
    }
    Ok(LinkEntry {
        source: a.to_string(),
        target: b.to_string(),
        capacity,
        directed: false,
        weight: None,
    })
}
