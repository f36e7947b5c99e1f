//! Line-oriented plan reports.
//!
//! ```text
//! # rebirth slim plan v1
//! PruneLrn new=conv1 removed=norm1 segment=conv1->norm1 retrain=yes fit=conv1<-norm1
//! AbsorbPool new=conv1 removed=pool1 segment=conv1->pool1 retrain=yes fit=conv1<-pool1
//! ReduceBottleneck new=r removed=- segment=r->c retrain=yes ratio=0.5 keep=0;2 fit=r<-r[0;2] fit=c<-c
//! ```
//!
//! Channel lists use `a-b` for inclusive runs; a concat order uses `_n` for
//! `n` channels without an original counterpart. Lines starting with `#`
//! are comments; skipped structures are listed that way.

use std::fmt::Write as _;

use thiserror::Error;

use super::{ChannelMap, PassKind, RetrainSpec, RewriteRecord, Segment, SlimPlan, TargetPiece};

pub const HEADER: &str = "# rebirth slim plan v1";

#[derive(Debug, Error, PartialEq)]
#[error("plan line {line}: {message}")]
pub struct PlanParseError {
    pub line: usize,
    pub message: String,
}

fn runs(values: impl Iterator<Item = usize>) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for v in values {
        match out.last_mut() {
            Some((_, end)) if end.checked_add(1) == Some(v) => *end = v,
            _ => out.push((v, v)),
        }
    }
    out
}

fn fmt_run((a, b): (usize, usize)) -> String {
    if a == b {
        a.to_string()
    } else {
        format!("{a}-{b}")
    }
}

fn fmt_channels(cs: &[usize]) -> String {
    runs(cs.iter().copied()).into_iter().map(fmt_run).collect::<Vec<_>>().join(";")
}

fn fmt_map(map: &ChannelMap) -> String {
    let mut parts = Vec::new();
    let mut i = 0;
    while i < map.len() {
        let j = map[i..].iter().position(|m| m.is_some() != map[i].is_some()).map_or(map.len(), |p| i + p);
        if map[i].is_none() {
            parts.push(format!("_{}", j - i));
        } else {
            parts.extend(runs(map[i..j].iter().map(|m| m.expect("some"))).into_iter().map(fmt_run));
        }
        i = j;
    }
    parts.join(";")
}

fn fmt_piece(p: &TargetPiece) -> String {
    match &p.channels {
        None => p.node.clone(),
        Some(cs) => format!("{}[{}]", p.node, fmt_channels(cs)),
    }
}

pub fn format_record(r: &RewriteRecord) -> String {
    let mut s = String::new();
    let removed = if r.removed_ids.is_empty() {
        "-".to_string()
    } else {
        r.removed_ids.join(",")
    };
    let _ = write!(
        s,
        "{} new={} removed={} segment={}->{} retrain={}",
        r.pass,
        r.new_id,
        removed,
        r.segment.entry,
        r.segment.exit,
        if r.needs_retrain { "yes" } else { "no" }
    );
    if let Some(c) = &r.concat {
        let _ = write!(s, " concat={c}");
    }
    if let Some(m) = &r.channel_map {
        let _ = write!(s, " order={}", fmt_map(m));
    }
    if let Some(x) = r.ratio {
        let _ = write!(s, " ratio={x}");
    }
    if let Some(k) = &r.kept {
        let _ = write!(s, " keep={}", fmt_channels(k));
    }
    if r.force {
        s.push_str(" force=yes");
    }
    if let Some(c) = r.channels {
        let _ = write!(s, " channels={c}");
    }
    if let Some(g) = r.group {
        let _ = write!(s, " group={g}");
    }
    for spec in &r.retrain {
        let pieces: Vec<String> = spec.target.iter().map(fmt_piece).collect();
        let _ = write!(s, " fit={}<-{}", spec.layer, pieces.join("+"));
    }
    s
}

pub fn format_plan(plan: &SlimPlan) -> String {
    let mut s = String::from(HEADER);
    s.push('\n');
    if plan.records.is_empty() {
        s.push_str("# empty plan: nothing to slim\n");
    }
    for r in &plan.records {
        s.push_str(&format_record(r));
        s.push('\n');
    }
    for k in &plan.skipped {
        let _ = writeln!(s, "# skipped {} at {}: {}", k.pass, k.at, k.reason.replace('\n', " "));
    }
    s
}

fn parse_usize(v: &str) -> Result<usize, String> {
    v.parse::<usize>().map_err(|e| format!("bad number {v:?}: {e}"))
}

fn parse_run(part: &str) -> Result<(usize, usize), String> {
    match part.split_once('-') {
        Some((a, b)) => {
            let (a, b) = (parse_usize(a)?, parse_usize(b)?);
            if b < a {
                return Err(format!("descending run {part:?}"));
            }
            Ok((a, b))
        }
        None => {
            let a = parse_usize(part)?;
            Ok((a, a))
        }
    }
}

/// Longest list a channel list may expand to; bounds memory on hostile input.
const MAX_CHANNELS: usize = 1 << 20;

fn push_run(out: &mut Vec<Option<usize>>, (a, b): (usize, usize)) -> Result<(), String> {
    if b - a >= MAX_CHANNELS || out.len() + (b - a) >= MAX_CHANNELS {
        return Err("channel list too long".into());
    }
    out.extend((a..=b).map(Some));
    Ok(())
}

fn parse_channels(v: &str) -> Result<Vec<usize>, String> {
    let mut out = Vec::new();
    for part in v.split(';') {
        push_run(&mut out, parse_run(part)?)?;
    }
    Ok(out.into_iter().flatten().collect())
}

fn parse_map(v: &str) -> Result<ChannelMap, String> {
    let mut out = Vec::new();
    for part in v.split(';') {
        if let Some(n) = part.strip_prefix('_') {
            let n = parse_usize(n)?;
            if out.len() + n >= MAX_CHANNELS {
                return Err("channel list too long".into());
            }
            out.extend(std::iter::repeat_n(None, n));
        } else {
            push_run(&mut out, parse_run(part)?)?;
        }
    }
    Ok(out)
}

fn parse_id(v: &str) -> Result<String, String> {
    if crate::graph::valid_id(v) {
        Ok(v.to_string())
    } else {
        Err(format!("invalid node id {v:?}"))
    }
}

fn parse_piece(v: &str) -> Result<TargetPiece, String> {
    match v.split_once('[') {
        Some((node, rest)) => {
            let inner = rest.strip_suffix(']').ok_or_else(|| format!("unclosed channel list in {v:?}"))?;
            Ok(TargetPiece {
                node: parse_id(node)?,
                channels: Some(parse_channels(inner)?),
            })
        }
        None => Ok(TargetPiece::whole(parse_id(v)?)),
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "yes" => Ok(true),
        "no" => Ok(false),
        _ => Err(format!("expected yes or no, got {v:?}")),
    }
}

pub fn parse_record(line: &str) -> Result<RewriteRecord, String> {
    let mut tokens = line.split_whitespace();
    let pass: PassKind = tokens.next().ok_or("empty record")?.parse()?;
    let mut new_id = None;
    let mut segment = None;
    let mut retrain_flag = None;
    let mut rec = RewriteRecord::new(pass, String::new(), Segment::new("", ""));
    for tok in tokens {
        let (key, value) = tok.split_once('=').ok_or_else(|| format!("expected key=value, got {tok:?}"))?;
        match key {
            "new" => new_id = Some(parse_id(value)?),
            "removed" => {
                if value != "-" {
                    rec.removed_ids = value.split(',').map(parse_id).collect::<Result<_, _>>()?;
                }
            }
            "segment" => {
                let (a, b) = value.split_once("->").ok_or_else(|| format!("bad segment {value:?}"))?;
                segment = Some(Segment::new(parse_id(a)?, parse_id(b)?));
            }
            "retrain" => retrain_flag = Some(parse_bool(value)?),
            "concat" => rec.concat = Some(parse_id(value)?),
            "order" => rec.channel_map = Some(parse_map(value)?),
            "ratio" => {
                rec.ratio = Some(value.parse::<f64>().map_err(|e| format!("bad ratio {value:?}: {e}"))?)
            }
            "keep" => rec.kept = Some(parse_channels(value)?),
            "force" => rec.force = parse_bool(value)?,
            "channels" => rec.channels = Some(parse_usize(value)?),
            "group" => rec.group = Some(parse_usize(value)?),
            "fit" => {
                let (layer, pieces) = value.split_once("<-").ok_or_else(|| format!("bad fit {value:?}"))?;
                rec.retrain.push(RetrainSpec {
                    layer: parse_id(layer)?,
                    target: pieces.split('+').map(parse_piece).collect::<Result<_, _>>()?,
                });
            }
            _ => return Err(format!("unknown key {key:?}")),
        }
    }
    rec.new_id = new_id.ok_or("missing new=")?;
    rec.segment = segment.ok_or("missing segment=")?;
    rec.needs_retrain = retrain_flag.ok_or("missing retrain=")?;
    if rec.needs_retrain == pass.is_exact() {
        return Err(format!(
            "{pass} records have retrain={}",
            if pass.is_exact() { "no" } else { "yes" }
        ));
    }
    Ok(rec)
}

/// Parses a plan report. Comment lines (including skipped-structure notes)
/// are ignored, so `skipped` comes back empty.
pub fn parse_plan(text: &str) -> Result<SlimPlan, PlanParseError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, l)) if l.trim() == HEADER => {}
        Some((i, _)) => {
            return Err(PlanParseError {
                line: i + 1,
                message: format!("expected header {HEADER:?}"),
            })
        }
        None => {
            return Err(PlanParseError {
                line: 1,
                message: "empty plan file".into(),
            })
        }
    }
    let mut plan = SlimPlan::default();
    for (i, line) in lines {
        let line = line.trim();
        if line.starts_with('#') {
            continue;
        }
        let rec = parse_record(line).map_err(|message| PlanParseError { line: i + 1, message })?;
        plan.records.push(rec);
    }
    Ok(plan)
}
