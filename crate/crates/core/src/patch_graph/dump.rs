//! Line-oriented text dump of a [`PatchGraph`].
//!
//! ```text
//! N K d p
//! <node id> <masked 0|1> f1 .. fd      (N lines)
//! <src> <dst> <relation> <weight>      (N·K lines)
//! ```
//! Reals are written in shortest round-trip form, so parsing a dump restores
//! every value bit-exactly.

use std::fmt::Write as _;
use std::str::FromStr;

use super::{Edge, PatchGraph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

impl PatchGraph {
    pub fn dump(&self) -> String {
        let (n, d) = (self.node_count(), self.feature_dim());
        let mut out = String::new();
        writeln!(out, "{n} {} {d} {}", self.k, self.mask_rate).unwrap();
        let flags = self.mask_flags();
        for i in 0..n {
            write!(out, "{i} {}", u8::from(flags[i])).unwrap();
            for v in self.node_features.row(i) {
                write!(out, " {v}").unwrap();
            }
            out.push('\n');
        }
        for e in &self.edges {
            writeln!(out, "{} {} {} {}", e.src, e.dst, e.relation, e.weight).unwrap();
        }
        out
    }
}

fn field<T: FromStr>(tok: Option<&str>, line: usize, what: &str) -> Result<T> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::Data(format!("graph dump line {line}: bad or missing {what}")))
}

pub fn parse_dump(text: &str) -> Result<PatchGraph> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let (ln, header) = lines
        .next()
        .ok_or_else(|| Error::Data("empty graph dump".into()))?;
    let mut h = header.split_whitespace();
    let n: usize = field(h.next(), ln, "N")?;
    let k: usize = field(h.next(), ln, "K")?;
    let d: usize = field(h.next(), ln, "d")?;
    let p: f64 = field(h.next(), ln, "p")?;

    let mut features = Vec::with_capacity(n * d);
    let mut mask_rows = Vec::new();
    for expected in 0..n {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| Error::Data(format!("graph dump: missing node line {expected}")))?;
        let mut t = line.split_whitespace();
        let id: usize = field(t.next(), ln, "node id")?;
        if id != expected {
            return Err(Error::Data(format!("graph dump line {ln}: node {id} out of order")));
        }
        match field::<u8>(t.next(), ln, "mask flag")? {
            0 => {}
            1 => mask_rows.push(id),
            other => return Err(Error::Data(format!("line {ln}: mask flag {other}"))),
        }
        for c in 0..d {
            features.push(field(t.next(), ln, &format!("feature {c}"))?);
        }
    }

    let mut edges = Vec::with_capacity(n * k);
    let mut neighbors = vec![Vec::with_capacity(k); n];
    let mut relation_count = 1;
    for (ln, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut t = line.split_whitespace();
        let e = Edge {
            src: field(t.next(), ln, "src")?,
            dst: field(t.next(), ln, "dst")?,
            relation: field(t.next(), ln, "relation")?,
            weight: field(t.next(), ln, "weight")?,
        };
        if e.src >= n || e.dst >= n || !(0.0..=1.0).contains(&e.weight) {
            return Err(Error::Data(format!("graph dump line {ln}: invalid edge")));
        }
        relation_count = relation_count.max(e.relation + 1);
        neighbors[e.dst].push(e.src);
        edges.push(e);
    }
    if neighbors.iter().any(|l| l.len() != k) {
        return Err(Error::Data(format!("graph dump: every node needs {k} edges")));
    }
    Ok(PatchGraph {
        node_features: Tensor::new(vec![n, d], features)?,
        edges,
        neighbors,
        k,
        relation_count,
        mask_rows,
        mask_rate: p,
    })
}
