//! Line-oriented text format for architectures.
//!
//! ```text
//! netshrink-arch 1
//! input 1 28 28
//! classes 10
//! block 2 5
//! # type kernel stride padding n_out skip_start skip_end
//! conv2d 3 1 1 8 0 0
//! relu 0 1 0 0 0 0
//! ```
//!
//! `block` lines list inclusive layer spans. The skip fields of each layer
//! record are checked against the spans on parse.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use super::{ArchError, Architecture, Block, LayerSpec, LayerType, Shape};

const MAGIC: &str = "netshrink-arch";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("missing `{0}` header")]
    MissingHeader(&'static str),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error("layer {index}: skip fields ({found_start}, {found_end}) disagree with block spans ({want_start}, {want_end})")]
    SkipMismatch { index: usize, found_start: u32, found_end: u32, want_start: u32, want_end: u32 },
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{MAGIC} {VERSION}")?;
        let s = self.input_shape;
        writeln!(f, "input {} {} {}", s.c, s.h, s.w)?;
        writeln!(f, "classes {}", self.n_classes)?;
        for b in &self.blocks {
            writeln!(f, "block {} {}", b.start, b.end)?;
        }
        writeln!(f, "# type kernel stride padding n_out skip_start skip_end")?;
        for l in &self.layers {
            writeln!(
                f,
                "{} {} {} {} {} {} {}",
                l.layer_type, l.kernel, l.stride, l.padding, l.n_out, l.skip_start, l.skip_end
            )?;
        }
        Ok(())
    }
}

fn parse_nums<const N: usize>(line: usize, fields: &[&str]) -> Result<[u64; N], FormatError> {
    if fields.len() != N {
        return Err(FormatError::Syntax { line, msg: format!("expected {N} numbers, found {}", fields.len()) });
    }
    let mut out = [0u64; N];
    for (o, f) in out.iter_mut().zip(fields) {
        *o = f
            .parse()
            .map_err(|_| FormatError::Syntax { line, msg: format!("`{f}` is not a non-negative integer") })?;
    }
    Ok(out)
}

fn to_u32(line: usize, v: u64) -> Result<u32, FormatError> {
    u32::try_from(v).map_err(|_| FormatError::Syntax { line, msg: format!("{v} out of range") })
}

impl FromStr for Architecture {
    type Err = FormatError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut seen_magic = false;
        let mut input = None;
        let mut classes = None;
        let mut blocks = Vec::new();
        let mut layers = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let fields: Vec<&str> = body.split_whitespace().collect();
            let (head, rest) = (fields[0], &fields[1..]);
            if !seen_magic {
                if head != MAGIC {
                    return Err(FormatError::Syntax { line, msg: format!("expected `{MAGIC}` header") });
                }
                let [v] = parse_nums::<1>(line, rest)?;
                if v != VERSION as u64 {
                    return Err(FormatError::Syntax { line, msg: format!("unsupported version {v}") });
                }
                seen_magic = true;
                continue;
            }
            match head {
                "input" => {
                    let [c, h, w] = parse_nums::<3>(line, rest)?;
                    input = Some(Shape::new(c as usize, h as usize, w as usize));
                }
                "classes" => {
                    let [n] = parse_nums::<1>(line, rest)?;
                    classes = Some(to_u32(line, n)?);
                }
                "block" => {
                    let [s, e] = parse_nums::<2>(line, rest)?;
                    blocks.push(Block { start: s as usize, end: e as usize });
                }
                name => {
                    let layer_type = LayerType::from_name(name)
                        .ok_or_else(|| FormatError::Syntax { line, msg: format!("unknown record `{name}`") })?;
                    let [k, s, p, n, ss, se] = parse_nums::<6>(line, rest)?;
                    layers.push(LayerSpec {
                        layer_type,
                        kernel: to_u32(line, k)?,
                        stride: to_u32(line, s)?,
                        padding: to_u32(line, p)?,
                        n_out: to_u32(line, n)?,
                        skip_start: to_u32(line, ss)?,
                        skip_end: to_u32(line, se)?,
                    });
                }
            }
        }
        if !seen_magic {
            return Err(FormatError::MissingHeader(MAGIC));
        }
        let input = input.ok_or(FormatError::MissingHeader("input"))?;
        let classes = classes.ok_or(FormatError::MissingHeader("classes"))?;
        let declared = layers.clone();
        let arch = Architecture::new(layers, input, classes, blocks)?;
        for (index, (got, want)) in declared.iter().zip(&arch.layers).enumerate() {
            if got.skip_start != want.skip_start || got.skip_end != want.skip_end {
                return Err(FormatError::SkipMismatch {
                    index,
                    found_start: got.skip_start,
                    found_end: got.skip_end,
                    want_start: want.skip_start,
                    want_end: want.skip_end,
                });
            }
        }
        Ok(arch)
    }
}
