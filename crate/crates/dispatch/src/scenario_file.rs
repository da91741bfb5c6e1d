//! Scenario files.
//!
//! A scenario is a line-oriented document of `[section]` headers followed by
//! `key = value` lines; `#` starts a comment. Numbers are decimal with an
//! optional exponent. Lists are whitespace separated. Powers are in MW /
//! MVAr and are converted to per-unit with the grid's base.
//!
//! ```text
//! [horizon]
//! steps = 20                 # T >= 1
//!
//! [prices]
//! mode = random              # constant | random | list
//! base = 1                   # price for mode = constant (default 1)
//! values = 1 1.5 ...         # T prices for mode = list
//! scale = 1                  # energy cost U_a(t) = scale * u_t * p_a[MW]
//! loss_weight = 1            # one value, or T values
//!
//! [seed]
//! value = 7                  # drives mode = random and p/q = random
//!
//! [ensemble 17]              # one section per ensemble bus
//! states = 8
//! p = random                 # n values, or random: U[10%, 200%] of the bus load
//! q = random
//! target = circulant 0.2 0.6 0.2
//! gamma = circulant 10 1 10  # or a scalar, or n lines like target
//! rho0 = uniform             # or n values
//! cost = ...                 # optional, T lines of n values replacing the price product
//!
//! [bounds]
//! control 6 = -0.1 0.1 -0.2 0.2   # p_min p_max q_min q_max
//!
//! [algorithm]
//! variant = std2             # std2 | hybrid
//! step = 0.5
//! schedule = constant        # constant | diminishing | adaptive
//! scaling = curvature        # curvature | raw
//! tol_primal = 1e-5
//! tol_dual = 1e-5
//! max_iter = 500
//! divergence_window = 20
//! divergence_factor = 1000
//! ```
//!
//! Matrices are written one line per origin state: `target` line `b` lists
//! the probabilities of moving from state `b` to each state. `circulant c0
//! c1 ...` gives origin `b` the entry `ck` at destination `(b + k) mod n`.
//! Penalty weights must be positive exactly on the target's support; a
//! scalar is applied on the support.

use nalgebra::{DMatrix, DVector};
use tcl_dispatch_core::scenario::{random_prices, random_state_loads};
use tcl_dispatch_core::{
    AlgorithmOptions, ControlBounds, EnsembleSpec, GridModel, ScenarioSpec, StepSchedule, StepScaling, Variant,
};

use crate::error::IngestError;

#[derive(Debug)]
struct Entry<'a> {
    line: usize,
    key: &'a str,
    value: &'a str,
}

#[derive(Debug)]
struct Section<'a> {
    line: usize,
    name: &'a str,
    arg: Option<&'a str>,
    entries: Vec<Entry<'a>>,
}

impl<'a> Section<'a> {
    fn all(&self, key: &str) -> Vec<&Entry<'a>> {
        self.entries.iter().filter(|e| e.key == key).collect()
    }

    fn one(&self, key: &str) -> Result<Option<&Entry<'a>>, IngestError> {
        let hits = self.all(key);
        match hits.as_slice() {
            [] => Ok(None),
            [e] => Ok(Some(e)),
            [_, e, ..] => Err(IngestError::parse(e.line, format!("{key} given more than once"))),
        }
    }

    fn check_keys(&self, allowed: &[&str]) -> Result<(), IngestError> {
        for e in &self.entries {
            if !allowed.contains(&e.key) {
                return Err(IngestError::parse(
                    e.line,
                    format!("unknown key {:?} in [{}]", e.key, self.name),
                ));
            }
        }
        Ok(())
    }
}

fn sections(text: &str) -> Result<Vec<Section<'_>>, IngestError> {
    let mut out: Vec<Section> = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        if let Some(head) = body.strip_prefix('[') {
            let head = head
                .strip_suffix(']')
                .ok_or_else(|| IngestError::parse(line, "section header is missing ']'"))?
                .trim();
            let mut parts = head.split_whitespace();
            let name = parts.next().ok_or_else(|| IngestError::parse(line, "empty section name"))?;
            let arg = parts.next();
            if parts.next().is_some() {
                return Err(IngestError::parse(line, "section header has too many words"));
            }
            out.push(Section {
                line,
                name,
                arg,
                entries: Vec::new(),
            });
            continue;
        }
        let (key, value) = body
            .split_once('=')
            .ok_or_else(|| IngestError::parse(line, "expected `key = value`"))?;
        let section = out
            .last_mut()
            .ok_or_else(|| IngestError::parse(line, "entry before any section header"))?;
        section.entries.push(Entry {
            line,
            key: key.trim(),
            value: value.trim(),
        });
    }
    Ok(out)
}

fn number(e: &Entry, s: &str) -> Result<f64, IngestError> {
    let v: f64 = s
        .parse()
        .map_err(|_| IngestError::parse(e.line, format!("{s:?} is not a number")))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(IngestError::parse(e.line, format!("{s:?} is not finite")))
    }
}

fn scalar(e: &Entry) -> Result<f64, IngestError> {
    number(e, e.value)
}

fn list(e: &Entry) -> Result<Vec<f64>, IngestError> {
    e.value.split_whitespace().map(|s| number(e, s)).collect()
}

fn list_of(e: &Entry, n: usize) -> Result<Vec<f64>, IngestError> {
    let v = list(e)?;
    if v.len() == n {
        Ok(v)
    } else {
        Err(IngestError::parse(
            e.line,
            format!("{} expects {n} values, found {}", e.key, v.len()),
        ))
    }
}

fn integer(e: &Entry) -> Result<i64, IngestError> {
    e.value
        .parse()
        .map_err(|_| IngestError::parse(e.line, format!("{:?} is not an integer", e.value)))
}

fn count(e: &Entry) -> Result<usize, IngestError> {
    let v = integer(e)?;
    usize::try_from(v).map_err(|_| IngestError::parse(e.line, format!("{} must not be negative, got {v}", e.key)))
}

/// Parses a scenario against `model`. `seed` overrides the file's `[seed]`.
pub fn load_scenario(text: &str, model: &GridModel, seed: Option<u64>) -> Result<ScenarioSpec, IngestError> {
    let secs = sections(text)?;
    let find = |name: &str| -> Result<Option<&Section>, IngestError> {
        let hits: Vec<&Section> = secs.iter().filter(|s| s.name == name).collect();
        match hits.as_slice() {
            [] => Ok(None),
            [s] => Ok(Some(s)),
            [_, s, ..] => Err(IngestError::parse(s.line, format!("section [{name}] appears twice"))),
        }
    };
    for s in &secs {
        if !matches!(s.name, "horizon" | "prices" | "seed" | "ensemble" | "bounds" | "algorithm") {
            return Err(IngestError::parse(s.line, format!("unknown section [{}]", s.name)));
        }
        if (s.name == "ensemble") != s.arg.is_some() {
            return Err(IngestError::parse(s.line, format!("malformed header for [{}]", s.name)));
        }
    }

    let horizon_sec = find("horizon")?.ok_or_else(|| IngestError::Structure("missing [horizon] section".into()))?;
    horizon_sec.check_keys(&["steps"])?;
    let steps = horizon_sec
        .one("steps")?
        .ok_or_else(|| IngestError::parse(horizon_sec.line, "[horizon] needs steps"))?;
    let t = integer(steps)?;
    if t < 1 {
        return Err(IngestError::parse(steps.line, format!("horizon must be at least 1, got {t}")));
    }
    let horizon = t as usize;

    let seed = match seed {
        Some(s) => Some(s),
        None => match find("seed")? {
            Some(sec) => {
                sec.check_keys(&["value"])?;
                match sec.one("value")? {
                    Some(e) => Some(
                        e.value
                            .parse::<u64>()
                            .map_err(|_| IngestError::parse(e.line, format!("{:?} is not a seed", e.value)))?,
                    ),
                    None => None,
                }
            }
            None => None,
        },
    };
    let need_seed = |line: usize| seed.ok_or_else(|| IngestError::parse(line, "random draws need a [seed]"));

    let mut prices = vec![1.0; horizon];
    let mut loss_weight = vec![1.0; horizon];
    let mut scale = 1.0;
    if let Some(sec) = find("prices")? {
        sec.check_keys(&["mode", "base", "values", "scale", "loss_weight"])?;
        let base = sec.one("base")?.map(scalar).transpose()?.unwrap_or(1.0);
        let mode = sec.one("mode")?;
        match mode.map(|e| e.value).unwrap_or("constant") {
            "constant" => prices = vec![base; horizon],
            "random" => prices = random_prices(need_seed(mode.map_or(sec.line, |e| e.line))?, horizon),
            "list" => {
                let e = sec
                    .one("values")?
                    .ok_or_else(|| IngestError::parse(sec.line, "mode = list needs values"))?;
                prices = list_of(e, horizon)?;
            }
            other => {
                let line = mode.map_or(sec.line, |e| e.line);
                return Err(IngestError::parse(line, format!("unknown price mode {other:?}")));
            }
        }
        if let Some(e) = sec.one("scale")? {
            scale = scalar(e)?;
        }
        if let Some(e) = sec.one("loss_weight")? {
            let v = list(e)?;
            loss_weight = match v.len() {
                1 => vec![v[0]; horizon],
                n if n == horizon => v,
                n => return Err(IngestError::parse(e.line, format!("loss_weight expects 1 or {horizon} values, found {n}"))),
            };
        }
    }

    let mut ensembles = Vec::new();
    for sec in secs.iter().filter(|s| s.name == "ensemble") {
        let arg = sec.arg.unwrap_or_default();
        let bus: usize = arg
            .parse()
            .map_err(|_| IngestError::parse(sec.line, format!("{arg:?} is not a bus id")))?;
        if ensembles.iter().any(|(b, _)| *b == bus) {
            return Err(IngestError::parse(sec.line, format!("second [ensemble {bus}] section")));
        }
        let host = model
            .bus(bus)
            .ok_or_else(|| IngestError::parse(sec.line, format!("ensemble at bus {bus}, which is not in the grid")))?;
        let spec = ensemble(sec, host.p_load, host.q_load, model.base_mva, horizon, &prices, scale, seed, bus)?;
        ensembles.push((bus, spec));
    }
    ensembles.sort_by_key(|(b, _)| *b);

    let mut controls = Vec::new();
    if let Some(sec) = find("bounds")? {
        for e in &sec.entries {
            let bus = e
                .key
                .strip_prefix("control")
                .map(str::trim)
                .and_then(|s| s.parse::<usize>().ok())
                .ok_or_else(|| IngestError::parse(e.line, format!("expected `control <bus> = ...`, found {:?}", e.key)))?;
            if model.bus(bus).is_none() {
                return Err(IngestError::parse(e.line, format!("control bounds for unknown bus {bus}")));
            }
            let v = list_of(e, 4)?;
            if v[0] > v[1] || v[2] > v[3] {
                return Err(IngestError::parse(e.line, "lower bound above upper bound"));
            }
            controls.push(ControlBounds {
                bus,
                p_min: v[0] / model.base_mva,
                p_max: v[1] / model.base_mva,
                q_min: v[2] / model.base_mva,
                q_max: v[3] / model.base_mva,
            });
        }
    }

    let algorithm = match find("algorithm")? {
        Some(sec) => algorithm(sec)?,
        None => AlgorithmOptions::default(),
    };

    let spec = ScenarioSpec {
        horizon,
        prices,
        loss_weight,
        ensembles,
        controls,
        algorithm,
        seed,
    };
    spec.validate(model)?;
    Ok(spec)
}

#[allow(clippy::too_many_arguments)]
fn ensemble(
    sec: &Section,
    rated_p: f64,
    rated_q: f64,
    base_mva: f64,
    horizon: usize,
    prices: &[f64],
    scale: f64,
    seed: Option<u64>,
    bus: usize,
) -> Result<EnsembleSpec, IngestError> {
    sec.check_keys(&["states", "p", "q", "target", "gamma", "rho0", "cost"])?;
    let req = |key: &str| {
        sec.one(key)?
            .ok_or_else(|| IngestError::parse(sec.line, format!("[ensemble {bus}] needs {key}")))
    };
    let states = req("states")?;
    let n = count(states)?;
    if n == 0 {
        return Err(IngestError::parse(states.line, "an ensemble needs at least one state"));
    }

    // Random draws are in MW; per-unit after.
    let powers = |key: &str, rated_pu: f64, stream_bus: usize| -> Result<Vec<f64>, IngestError> {
        let e = req(key)?;
        let mw = if e.value == "random" {
            let seed = seed.ok_or_else(|| IngestError::parse(e.line, "random draws need a [seed]"))?;
            random_state_loads(seed, stream_bus, rated_pu * base_mva, n)
        } else {
            list_of(e, n)?
        };
        Ok(mw.iter().map(|v| v / base_mva).collect())
    };
    let p = powers("p", rated_p, bus)?;
    // Reactive draws use their own streams, offset past any bus id.
    let q = powers("q", rated_q, bus + (1 << 20))?;

    let target_lines = sec.all("target");
    let target = matrix(&target_lines, n, "target")?;
    let target_line = target_lines.first().map_or(sec.line, |e| e.line);
    for b in 0..n {
        let s: f64 = target.column(b).sum();
        if target.column(b).iter().any(|&v| v < 0.0) || (s - 1.0).abs() > 1e-9 {
            return Err(IngestError::parse(
                target_line,
                format!("target row for origin {b} must be a probability distribution (sums to {s})"),
            ));
        }
    }

    let gamma_lines = sec.all("gamma");
    let gamma = match gamma_lines.as_slice() {
        [] => return Err(IngestError::parse(sec.line, format!("[ensemble {bus}] needs gamma"))),
        [e] if !e.value.starts_with("circulant") && e.value.split_whitespace().count() == 1 => {
            let g = scalar(e)?;
            if !(g > 0.0) {
                return Err(IngestError::parse(e.line, format!("gamma must be positive, got {g}")));
            }
            target.map(|v| if v > 0.0 { g } else { 0.0 })
        }
        lines => {
            let g = matrix(lines, n, "gamma")?;
            for b in 0..n {
                for a in 0..n {
                    let line = if lines.len() == 1 { lines[0].line } else { lines[b].line };
                    if target[(a, b)] == 0.0 && g[(a, b)] != 0.0 {
                        return Err(IngestError::parse(
                            line,
                            format!("gamma given for transition {b}->{a}, which the target does not allow"),
                        ));
                    }
                    if target[(a, b)] > 0.0 && !(g[(a, b)] > 0.0) {
                        return Err(IngestError::parse(
                            line,
                            format!("gamma for transition {b}->{a} must be positive"),
                        ));
                    }
                }
            }
            g
        }
    };

    let rho_in = match sec.one("rho0")? {
        None => DVector::from_element(n, 1.0 / n as f64),
        Some(e) if e.value == "uniform" => DVector::from_element(n, 1.0 / n as f64),
        Some(e) => DVector::from_vec(list_of(e, n)?),
    };

    let cost_lines = sec.all("cost");
    let energy_cost = if cost_lines.is_empty() {
        DMatrix::from_fn(horizon, n, |s, a| scale * prices[s] * p[a] * base_mva)
    } else {
        if cost_lines.len() != horizon {
            return Err(IngestError::parse(
                cost_lines[0].line,
                format!("cost needs {horizon} lines (one per step), found {}", cost_lines.len()),
            ));
        }
        let rows = cost_lines
            .iter()
            .map(|e| list_of(e, n))
            .collect::<Result<Vec<_>, _>>()?;
        DMatrix::from_fn(horizon, n, |s, a| rows[s][a])
    };

    Ok(EnsembleSpec {
        p,
        q,
        target,
        gamma: vec![gamma],
        energy_cost,
        rho_in,
    })
}

/// Column-stochastic matrix from per-origin lines (or one circulant line).
fn matrix(lines: &[&Entry], n: usize, key: &str) -> Result<DMatrix<f64>, IngestError> {
    if let [e] = lines {
        if let Some(rest) = e.value.strip_prefix("circulant") {
            let coeffs = rest
                .split_whitespace()
                .map(|s| number(e, s))
                .collect::<Result<Vec<_>, _>>()?;
            if coeffs.is_empty() || coeffs.len() > n {
                return Err(IngestError::parse(e.line, format!("circulant needs 1 to {n} coefficients")));
            }
            let mut m = DMatrix::zeros(n, n);
            for b in 0..n {
                for (k, c) in coeffs.iter().enumerate() {
                    m[((b + k) % n, b)] += c;
                }
            }
            return Ok(m);
        }
    }
    if lines.len() != n {
        let line = lines.first().map_or(0, |e| e.line);
        return Err(IngestError::parse(
            line,
            format!("{key} needs {n} lines (one per origin state), found {}", lines.len()),
        ));
    }
    let mut m = DMatrix::zeros(n, n);
    for (b, e) in lines.iter().enumerate() {
        for (a, v) in list_of(e, n)?.into_iter().enumerate() {
            m[(a, b)] = v;
        }
    }
    Ok(m)
}

fn algorithm(sec: &Section) -> Result<AlgorithmOptions, IngestError> {
    sec.check_keys(&[
        "variant",
        "step",
        "schedule",
        "scaling",
        "tol_primal",
        "tol_dual",
        "max_iter",
        "divergence_window",
        "divergence_factor",
    ])?;
    let mut o = AlgorithmOptions::default();
    if let Some(e) = sec.one("variant")? {
        o.variant = parse_variant(e.value).ok_or_else(|| IngestError::parse(e.line, format!("unknown variant {:?}", e.value)))?;
    }
    if let Some(e) = sec.one("step")? {
        o.step = scalar(e)?;
    }
    if let Some(e) = sec.one("schedule")? {
        o.schedule = match e.value {
            "constant" => StepSchedule::Constant,
            "diminishing" => StepSchedule::Diminishing,
            "adaptive" => StepSchedule::Adaptive,
            v => return Err(IngestError::parse(e.line, format!("unknown schedule {v:?}"))),
        };
    }
    if let Some(e) = sec.one("scaling")? {
        o.scaling = match e.value {
            "curvature" => StepScaling::Curvature,
            "raw" => StepScaling::Raw,
            v => return Err(IngestError::parse(e.line, format!("unknown scaling {v:?}"))),
        };
    }
    if let Some(e) = sec.one("tol_primal")? {
        o.tol_primal = scalar(e)?;
    }
    if let Some(e) = sec.one("tol_dual")? {
        o.tol_dual = scalar(e)?;
    }
    if let Some(e) = sec.one("max_iter")? {
        o.max_iter = count(e)?;
    }
    if let Some(e) = sec.one("divergence_window")? {
        o.divergence_window = count(e)?;
    }
    if let Some(e) = sec.one("divergence_factor")? {
        o.divergence_factor = scalar(e)?;
    }
    Ok(o)
}

pub fn parse_variant(s: &str) -> Option<Variant> {
    match s {
        "std2" => Some(Variant::Std2),
        "hybrid" => Some(Variant::Hybrid),
        _ => None,
    }
}

pub fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Std2 => "std2",
        Variant::Hybrid => "hybrid",
    }
}
