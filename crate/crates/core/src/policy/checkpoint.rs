//! Plain-text parameter checkpoints.
//!
//! ```text
//! hedge-policy-checkpoint v1
//! seed 42
//! param asset.conv.kernel 8 1 3
//! 0.0123 -0.4 ...
//! ```
//!
//! Values use the shortest representation that parses back to the same
//! float, so a save/load round trip is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use super::PolicyParams;
use crate::autodiff::Tensor;
use crate::error::{bail, Error, Result};
use crate::scalar::Scalar;

pub const CHECKPOINT_HEADER: &str = "hedge-policy-checkpoint v1";

pub fn write_checkpoint<T: Scalar>(params: &PolicyParams<T>) -> String {
    let mut out = format!("{CHECKPOINT_HEADER}\nseed {}\n", params.seed);
    for (name, t) in params.iter() {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "param {name} {}", dims.join(" "));
        let values: Vec<String> = t.data().iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(out, "{}", values.join(" "));
    }
    out
}

pub fn read_checkpoint<T: Scalar>(text: &str) -> Result<PolicyParams<T>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    match lines.next() {
        Some((_, CHECKPOINT_HEADER)) => {}
        other => bail!(
            Data,
            "not a checkpoint: expected `{CHECKPOINT_HEADER}`, found {:?}",
            other.map(|(_, l)| l)
        ),
    }
    let seed = match lines.next() {
        Some((n, l)) => l
            .strip_prefix("seed ")
            .and_then(|s| s.parse::<u64>().ok())
            .ok_or_else(|| Error::Data(format!("line {n}: expected `seed <u64>`")))?,
        None => bail!(Data, "checkpoint truncated before seed"),
    };
    let mut entries = Vec::new();
    while let Some((n, head)) = lines.next() {
        if head.is_empty() {
            continue;
        }
        let mut parts = head.split_whitespace();
        if parts.next() != Some("param") {
            bail!(Data, "line {n}: expected `param <name> <dims…>`");
        }
        let name = parts
            .next()
            .ok_or_else(|| Error::Data(format!("line {n}: parameter without a name")))?;
        let shape = parts
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Data(format!("line {n}: bad dimension")))?;
        let (vn, body) = lines
            .next()
            .ok_or_else(|| Error::Data(format!("line {n}: `{name}` has no values")))?;
        let data = body
            .split_whitespace()
            .map(|v| v.parse::<T>())
            .collect::<std::result::Result<Vec<T>, _>>()
            .map_err(|_| Error::Data(format!("line {vn}: unparsable value in `{name}`")))?;
        let t = Tensor::from_vec(&shape, data)
            .map_err(|e| Error::Data(format!("line {vn}: `{name}`: {e}")))?;
        entries.push((name.to_string(), t));
    }
    PolicyParams::from_entries(entries, seed)
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, params: &PolicyParams<T>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_checkpoint(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<PolicyParams<T>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&text).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}
