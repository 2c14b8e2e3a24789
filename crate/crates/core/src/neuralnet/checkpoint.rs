//! Plain-text network checkpoints.
//!
//! ```text
//! deepbsde-network 1
//! input_dim 3
//! hidden 13 13
//! output_dim 1
//! activation tanh
//! group 0
//! weight 0 13 3
//! <13*3 values>
//! bias 0 13
//! <13 values>
//! ...
//! shift 3          (GroupSort only)
//! log_scale        (GroupSort only)
//! ```
//!
//! Values are written with 17 significant digits, which round-trips every
//! `f64` exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Activation, Architecture, NetworkParams};
use crate::error::{Error, Result};

const MAGIC: &str = "deepbsde-network 1";

fn push_values(out: &mut String, values: impl Iterator<Item = f64>) {
    let mut first = true;
    for v in values {
        if !first {
            out.push(' ');
        }
        first = false;
        let _ = write!(out, "{v:.16e}");
    }
    out.push('\n');
}

pub fn write_network(params: &NetworkParams) -> String {
    let arch = params.arch();
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "input_dim {}", arch.input_dim);
    let hidden: Vec<String> = arch.hidden.iter().map(|h| h.to_string()).collect();
    let _ = writeln!(out, "hidden {}", hidden.join(" "));
    let _ = writeln!(out, "output_dim {}", arch.output_dim);
    let (name, group) = match arch.activation {
        Activation::Tanh => ("tanh", 0),
        Activation::GroupSort { group } => ("groupsort", group),
    };
    let _ = writeln!(out, "activation {name}");
    let _ = writeln!(out, "group {group}");
    for (l, (r, c)) in arch.layer_shapes().into_iter().enumerate() {
        let _ = writeln!(out, "weight {l} {r} {c}");
        push_values(&mut out, params.weight(l).iter().copied());
        let _ = writeln!(out, "bias {l} {r}");
        push_values(&mut out, params.bias(l).iter().copied());
    }
    if arch.is_groupsort() {
        let _ = writeln!(out, "shift {}", arch.input_dim);
        push_values(&mut out, params.shift().iter().copied());
        out.push_str("log_scale\n");
        push_values(&mut out, std::iter::once(params.log_scale()));
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next_line(&mut self, what: &str) -> Result<(usize, &'a str)> {
        loop {
            match self.inner.next() {
                Some((_, l)) if l.trim().is_empty() => continue,
                Some((n, l)) => return Ok((n + 1, l.trim())),
                None => return Err(Error::Checkpoint(format!("unexpected end of file, expected {what}"))),
            }
        }
    }

    fn keyed(&mut self, key: &str) -> Result<(usize, Vec<&'a str>)> {
        let (n, line) = self.next_line(key)?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(Error::Checkpoint(format!("line {n}: expected '{key}', found '{line}'")));
        }
        Ok((n, parts.collect()))
    }

    fn values(&mut self, expected: usize, what: &str) -> Result<Vec<f64>> {
        let (n, line) = self.next_line(what)?;
        let values = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::Checkpoint(format!("line {n}: {e}")))?;
        if values.len() != expected {
            return Err(Error::Checkpoint(format!(
                "line {n}: {what} has {} values, expected {expected}",
                values.len()
            )));
        }
        Ok(values)
    }
}

fn parse_usize(n: usize, s: Option<&&str>) -> Result<usize> {
    s.ok_or_else(|| Error::Checkpoint(format!("line {n}: missing integer")))?
        .parse()
        .map_err(|e| Error::Checkpoint(format!("line {n}: {e}")))
}

pub fn parse_network(text: &str) -> Result<NetworkParams> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
    };
    let (n, magic) = lines.next_line("header")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("line {n}: not a network checkpoint")));
    }
    let (n, v) = lines.keyed("input_dim")?;
    let input_dim = parse_usize(n, v.first())?;
    let (n, v) = lines.keyed("hidden")?;
    let hidden = v
        .iter()
        .map(|s| s.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Checkpoint(format!("line {n}: {e}")))?;
    let (n, v) = lines.keyed("output_dim")?;
    let output_dim = parse_usize(n, v.first())?;
    let (n, v) = lines.keyed("activation")?;
    let name = v.first().copied().unwrap_or("");
    let (ng, g) = lines.keyed("group")?;
    let group = parse_usize(ng, g.first())?;
    let activation = match name {
        "tanh" => Activation::Tanh,
        "groupsort" => Activation::GroupSort { group },
        other => return Err(Error::Checkpoint(format!("line {n}: unknown activation '{other}'"))),
    };
    let arch = Architecture::new(input_dim, hidden, output_dim, activation)?;
    let mut params = NetworkParams::zeros(&arch);
    for (l, (r, c)) in arch.layer_shapes().into_iter().enumerate() {
        let (n, v) = lines.keyed("weight")?;
        if parse_usize(n, v.first())? != l || parse_usize(n, v.get(1))? != r || parse_usize(n, v.get(2))? != c {
            return Err(Error::Checkpoint(format!("line {n}: weight header does not match layer {l} ({r}x{c})")));
        }
        let w = lines.values(r * c, "weight")?;
        params.weight_mut(l).iter_mut().zip(w).for_each(|(d, s)| *d = s);
        let (n, v) = lines.keyed("bias")?;
        if parse_usize(n, v.first())? != l || parse_usize(n, v.get(1))? != r {
            return Err(Error::Checkpoint(format!("line {n}: bias header does not match layer {l}")));
        }
        let b = lines.values(r, "bias")?;
        params.bias_mut(l).iter_mut().zip(b).for_each(|(d, s)| *d = s);
    }
    if arch.is_groupsort() {
        let (n, v) = lines.keyed("shift")?;
        if parse_usize(n, v.first())? != input_dim {
            return Err(Error::Checkpoint(format!("line {n}: shift length mismatch")));
        }
        let s = lines.values(input_dim, "shift")?;
        params.shift_mut().copy_from_slice(&s);
        lines.keyed("log_scale")?;
        let ls = lines.values(1, "log_scale")?;
        params.set_log_scale(ls[0]);
    }
    Ok(params)
}

pub fn save_network(params: &NetworkParams, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_network(params))?;
    Ok(())
}

pub fn load_network(path: impl AsRef<Path>) -> Result<NetworkParams> {
    parse_network(&fs::read_to_string(path)?)
}
