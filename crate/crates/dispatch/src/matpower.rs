//! Matpower (version 2) case files.
//!
//! Only `mpc.baseMVA`, `mpc.bus` and `mpc.branch` are read. Loads come from
//! the Pd/Qd columns (MW/MVAr), voltage limits from Vmax/Vmin, the slack bus
//! is the bus of type 3 and its Vm is the reference voltage. Out-of-service
//! branches are dropped. Distribution cases that store impedances in ohms
//! and convert them at the end of the file (`... / (Vbase^2 / Sbase)`) are
//! recognised and converted with the base voltage of the first bus.

use tcl_dispatch_core::{Branch, Bus, Error as CoreError, GridModel};

use crate::error::IngestError;

const BUS_COLS: usize = 13;
const BRANCH_COLS: usize = 11;

// Column positions, zero-based.
const BUS_I: usize = 0;
const BUS_TYPE: usize = 1;
const PD: usize = 2;
const QD: usize = 3;
const VM: usize = 7;
const BASE_KV: usize = 9;
const VMAX: usize = 11;
const VMIN: usize = 12;
const F_BUS: usize = 0;
const T_BUS: usize = 1;
const BR_R: usize = 2;
const BR_X: usize = 3;
const BR_STATUS: usize = 10;

const REF: f64 = 3.0;

/// A numeric matrix with the source line of each row.
#[derive(Debug, Default)]
struct Matrix {
    rows: Vec<(usize, Vec<f64>)>,
}

#[derive(Debug, Default)]
struct RawCase {
    base_mva: Option<f64>,
    bus: Option<Matrix>,
    branch: Option<Matrix>,
    ohm_impedances: bool,
}

pub fn parse_matpower(text: &str) -> Result<GridModel, IngestError> {
    let raw = scan(text)?;
    let base_mva = raw
        .base_mva
        .ok_or_else(|| IngestError::Structure("mpc.baseMVA is missing".into()))?;
    if !(base_mva > 0.0) {
        return Err(IngestError::Structure(format!("mpc.baseMVA must be positive, got {base_mva}")));
    }
    let bus = raw.bus.ok_or_else(|| IngestError::Structure("mpc.bus is missing".into()))?;
    let branch = raw
        .branch
        .ok_or_else(|| IngestError::Structure("mpc.branch is missing".into()))?;
    check_width(&bus, BUS_COLS)?;
    check_width(&branch, BRANCH_COLS)?;

    let mut buses = Vec::with_capacity(bus.rows.len());
    let mut slack = None;
    for (line, row) in &bus.rows {
        let id = as_id(row[BUS_I], *line)?;
        if row[BUS_TYPE] == REF {
            if let Some((other, _)) = slack {
                return Err(IngestError::Parse {
                    line: *line,
                    msg: format!("second slack bus {id} (bus {other} is already the slack)"),
                });
            }
            slack = Some((id, row[VM]));
        }
        buses.push(Bus {
            id,
            p_load: row[PD] / base_mva,
            q_load: row[QD] / base_mva,
            v_min: row[VMIN],
            v_max: row[VMAX],
        });
    }
    let (slack_bus, v0) = slack.ok_or_else(|| CoreError::Model("no bus of type 3 (slack)".into()))?;

    let z_base = if raw.ohm_impedances {
        let kv = bus.rows.first().map(|(_, r)| r[BASE_KV]).unwrap_or(0.0);
        if !(kv > 0.0) {
            return Err(IngestError::Structure(
                "impedances are given in ohms but the first bus has no base voltage".into(),
            ));
        }
        kv * kv / base_mva
    } else {
        1.0
    };
    let mut branches = Vec::with_capacity(branch.rows.len());
    for (line, row) in &branch.rows {
        if row[BR_STATUS] == 0.0 {
            continue;
        }
        branches.push(Branch {
            from: as_id(row[F_BUS], *line)?,
            to: as_id(row[T_BUS], *line)?,
            r: row[BR_R] / z_base,
            x: row[BR_X] / z_base,
        });
    }
    Ok(GridModel::new(buses, branches, slack_bus, v0, base_mva)?)
}

fn check_width(m: &Matrix, min: usize) -> Result<(), IngestError> {
    let Some((_, first)) = m.rows.first() else {
        return Ok(());
    };
    let width = first.len();
    for (line, row) in &m.rows {
        if row.len() < min || row.len() != width {
            return Err(IngestError::Parse {
                line: *line,
                msg: format!("expected {} columns, found {}", width.max(min), row.len()),
            });
        }
    }
    Ok(())
}

fn as_id(v: f64, line: usize) -> Result<usize, IngestError> {
    if v >= 1.0 && v.fract() == 0.0 && v < usize::MAX as f64 {
        Ok(v as usize)
    } else {
        Err(IngestError::Parse {
            line,
            msg: format!("{v} is not a valid bus number"),
        })
    }
}

fn strip_comment(line: &str) -> &str {
    match line.find('%') {
        Some(k) => &line[..k],
        None => line,
    }
}

fn scan(text: &str) -> Result<RawCase, IngestError> {
    let mut raw = RawCase::default();
    let mut open: Option<(&str, Matrix)> = None;
    for (k, full) in text.lines().enumerate() {
        let line_no = k + 1;
        let line = strip_comment(full).trim();
        if line.is_empty() {
            continue;
        }
        if let Some((name, mut m)) = open.take() {
            let (body, closed) = match line.find(']') {
                Some(end) => (&line[..end], true),
                None => (line, false),
            };
            push_rows(&mut m, body, line_no)?;
            if closed {
                store(&mut raw, name, m);
            } else {
                open = Some((name, m));
            }
            continue;
        }
        let compact: String = line.chars().filter(|c| !c.is_whitespace()).collect();
        if compact.contains("BR_R") && compact.contains("Vbase^2") {
            raw.ohm_impedances = true;
        }
        let Some(rest) = line.strip_prefix("mpc.") else {
            continue;
        };
        let Some((name, value)) = rest.split_once('=') else {
            continue;
        };
        let name = name.trim();
        let value = value.trim();
        match name {
            "baseMVA" => {
                let v = value.trim_end_matches(';').trim();
                raw.base_mva = Some(v.parse().map_err(|_| IngestError::Parse {
                    line: line_no,
                    msg: format!("baseMVA value {v:?} is not a number"),
                })?);
            }
            "bus" | "branch" => {
                let Some(body) = value.strip_prefix('[') else {
                    return Err(IngestError::Parse {
                        line: line_no,
                        msg: format!("mpc.{name} must be a bracketed matrix"),
                    });
                };
                let key = if name == "bus" { "bus" } else { "branch" };
                let mut m = Matrix::default();
                match body.find(']') {
                    Some(end) => {
                        push_rows(&mut m, &body[..end], line_no)?;
                        store(&mut raw, key, m);
                    }
                    None => {
                        push_rows(&mut m, body, line_no)?;
                        open = Some((key, m));
                    }
                }
            }
            _ => {}
        }
    }
    if let Some((name, _)) = open {
        return Err(IngestError::Structure(format!("mpc.{name} is not closed with ']'")));
    }
    Ok(raw)
}

fn store(raw: &mut RawCase, name: &str, m: Matrix) {
    if name == "bus" {
        raw.bus = Some(m);
    } else {
        raw.branch = Some(m);
    }
}

/// Splits a matrix fragment into `;`-terminated rows.
fn push_rows(m: &mut Matrix, body: &str, line: usize) -> Result<(), IngestError> {
    for chunk in body.split(';') {
        let fields: Vec<&str> = chunk
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|s| !s.is_empty())
            .collect();
        if fields.is_empty() {
            continue;
        }
        let row = fields
            .iter()
            .map(|f| {
                f.parse::<f64>().map_err(|_| IngestError::Parse {
                    line,
                    msg: format!("{f:?} is not a number"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        m.rows.push((line, row));
    }
    Ok(())
}
