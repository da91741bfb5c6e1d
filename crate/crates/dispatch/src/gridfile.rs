//! Canonical text form of a [`GridModel`].
//!
//! ```text
//! # tcl-dispatch grid
//! base_mva 10.0
//! slack 1
//! v0 1.0
//! bus <id> <p_load> <q_load> <v_min> <v_max>
//! branch <from> <to> <r> <x>
//! ```
//!
//! Quantities are per-unit. Floats are written in shortest round-trip form,
//! so `parse_grid(&write_grid(m)) == m` exactly.

use std::fmt::Write as _;

use tcl_dispatch_core::{Branch, Bus, GridModel};

use crate::error::IngestError;

const HEADER: &str = "# tcl-dispatch grid";

pub fn write_grid(model: &GridModel) -> String {
    let mut out = String::new();
    writeln!(out, "{HEADER}").unwrap();
    writeln!(out, "base_mva {:?}", model.base_mva).unwrap();
    writeln!(out, "slack {}", model.slack_bus).unwrap();
    writeln!(out, "v0 {:?}", model.v0).unwrap();
    for b in &model.buses {
        writeln!(out, "bus {} {:?} {:?} {:?} {:?}", b.id, b.p_load, b.q_load, b.v_min, b.v_max).unwrap();
    }
    for br in &model.branches {
        writeln!(out, "branch {} {} {:?} {:?}", br.from, br.to, br.r, br.x).unwrap();
    }
    out
}

pub fn parse_grid(text: &str) -> Result<GridModel, IngestError> {
    let mut base_mva = None;
    let mut slack = None;
    let mut v0 = None;
    let mut buses = Vec::new();
    let mut branches = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line_no = k + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let key = fields.next().unwrap_or_default();
        let rest: Vec<&str> = fields.collect();
        let want = |n: usize| {
            if rest.len() == n {
                Ok(())
            } else {
                Err(IngestError::parse(line_no, format!("{key} takes {n} values, found {}", rest.len())))
            }
        };
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| IngestError::parse(line_no, format!("{s:?} is not a number")))
        };
        let id = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| IngestError::parse(line_no, format!("{s:?} is not a bus id")))
        };
        match key {
            "base_mva" => {
                want(1)?;
                base_mva = Some(num(rest[0])?);
            }
            "slack" => {
                want(1)?;
                slack = Some(id(rest[0])?);
            }
            "v0" => {
                want(1)?;
                v0 = Some(num(rest[0])?);
            }
            "bus" => {
                want(5)?;
                buses.push(Bus {
                    id: id(rest[0])?,
                    p_load: num(rest[1])?,
                    q_load: num(rest[2])?,
                    v_min: num(rest[3])?,
                    v_max: num(rest[4])?,
                });
            }
            "branch" => {
                want(4)?;
                branches.push(Branch {
                    from: id(rest[0])?,
                    to: id(rest[1])?,
                    r: num(rest[2])?,
                    x: num(rest[3])?,
                });
            }
            other => return Err(IngestError::parse(line_no, format!("unknown record {other:?}"))),
        }
    }
    let missing = |what: &str| IngestError::Structure(format!("grid file has no {what} record"));
    Ok(GridModel::new(
        buses,
        branches,
        slack.ok_or_else(|| missing("slack"))?,
        v0.ok_or_else(|| missing("v0"))?,
        base_mva.ok_or_else(|| missing("base_mva"))?,
    )?)
}
