//! Line-oriented reader for MATPOWER version-2 case files.

use sha2::{Digest, Sha256};

use super::CaseError;

pub const BUS_COLUMNS: usize = 13;
pub const GEN_COLUMNS: usize = 10;
pub const BRANCH_COLUMNS: usize = 11;
pub const GENCOST_MIN_COLUMNS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BusRow {
    pub id: usize,
    pub kind: u8,
    /// MW
    pub pd: f64,
    /// MVAr
    pub qd: f64,
    pub gs: f64,
    pub bs: f64,
    pub vm: f64,
    /// degrees
    pub va: f64,
    pub vmax: f64,
    pub vmin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenRow {
    pub bus: usize,
    pub pg: f64,
    pub qg: f64,
    pub qmax: f64,
    pub qmin: f64,
    pub vg: f64,
    pub status: bool,
    pub pmax: f64,
    pub pmin: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BranchRow {
    pub from: usize,
    pub to: usize,
    pub r: f64,
    pub x: f64,
    pub b: f64,
    /// MVA, 0 = unconstrained
    pub rate_a: f64,
    /// 0 means a line (unit ratio)
    pub tap: f64,
    /// degrees
    pub shift: f64,
    pub status: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenCostRow {
    /// 1 = piecewise linear, 2 = polynomial
    pub model: u8,
    pub startup: f64,
    pub shutdown: f64,
    /// Polynomial coefficients, highest order first, or the flattened
    /// `(p, f)` points of a piecewise-linear curve.
    pub coeffs: Vec<f64>,
}

/// The four tables of a case file plus its MVA base, in file units.
#[derive(Debug, Clone, PartialEq)]
pub struct RawCase {
    pub base_mva: f64,
    pub bus: Vec<BusRow>,
    pub gen: Vec<GenRow>,
    pub branch: Vec<BranchRow>,
    pub gencost: Vec<GenCostRow>,
    /// SHA-256 of the source text, hex encoded.
    pub checksum: String,
}

struct Matrix {
    rows: Vec<(usize, Vec<f64>)>,
}

fn strip_comment(line: &str) -> &str {
    match line.find('%') {
        Some(pos) => &line[..pos],
        None => line,
    }
}

fn parse_number(section: &'static str, line: usize, token: &str) -> Result<f64, CaseError> {
    let value = match token {
        "Inf" | "inf" => f64::INFINITY,
        "-Inf" | "-inf" => f64::NEG_INFINITY,
        _ => token.parse::<f64>().map_err(|_| CaseError::MalformedRow {
            section,
            line,
            reason: format!("non-numeric token `{token}`"),
        })?,
    };
    Ok(value)
}

fn section_name(name: &str) -> Option<&'static str> {
    match name {
        "bus" => Some("bus"),
        "gen" => Some("gen"),
        "branch" => Some("branch"),
        "gencost" => Some("gencost"),
        _ => None,
    }
}

/// Parses MATPOWER case text. `%` comments and columns beyond the ones the
/// toolkit uses are ignored; nothing is evaluated.
pub fn parse_case(text: &str) -> Result<RawCase, CaseError> {
    let mut base_mva = None;
    let mut matrices: [Option<Matrix>; 4] = [None, None, None, None];
    let slot = |name: &str| match name {
        "bus" => 0,
        "gen" => 1,
        "branch" => 2,
        _ => 3,
    };

    // (section, collected rows, tokens of the row in progress, line of row start)
    let mut open: Option<(&'static str, Vec<(usize, Vec<f64>)>, Vec<f64>, usize)> = None;

    for (idx, raw_line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let mut rest = strip_comment(raw_line).trim();

        if open.is_none() {
            let Some(eq) = rest.find('=') else { continue };
            let lhs = rest[..eq].trim();
            let rhs = rest[eq + 1..].trim();
            let field = lhs.rsplit('.').next().unwrap_or(lhs);
            if lhs == field {
                continue;
            }
            if field == "baseMVA" {
                let token = rhs.trim_end_matches(';').trim();
                base_mva = Some(parse_number("baseMVA", line_no, token)?);
                continue;
            }
            let Some(section) = section_name(field) else {
                continue;
            };
            let Some(after) = rhs.strip_prefix('[') else {
                return Err(CaseError::MalformedRow {
                    section,
                    line: line_no,
                    reason: "expected `[` to open the matrix".into(),
                });
            };
            open = Some((section, Vec::new(), Vec::new(), line_no));
            rest = after;
        }

        let (section, rows, current, start) = open.as_mut().expect("matrix is open");
        let mut closed = false;
        let body = match rest.find(']') {
            Some(pos) => {
                closed = true;
                &rest[..pos]
            }
            None => rest,
        };
        for (i, chunk) in body.split(';').enumerate() {
            if i > 0 && !current.is_empty() {
                rows.push((*start, std::mem::take(current)));
            }
            for token in chunk.split(|c: char| c.is_whitespace() || c == ',') {
                if token.is_empty() {
                    continue;
                }
                if current.is_empty() {
                    *start = line_no;
                }
                current.push(parse_number(section, line_no, token)?);
            }
        }
        // a newline also ends a row
        if !current.is_empty() {
            rows.push((*start, std::mem::take(current)));
        }
        if closed {
            let (section, rows, _, _) = open.take().expect("matrix is open");
            matrices[slot(section)] = Some(Matrix { rows });
        }
    }

    if let Some((section, ..)) = open {
        return Err(CaseError::MalformedRow {
            section,
            line: text.lines().count(),
            reason: "matrix is never closed with `]`".into(),
        });
    }

    let base_mva = base_mva.ok_or(CaseError::MissingSection("baseMVA"))?;
    let [bus, gen, branch, gencost] = matrices;
    let bus = bus.ok_or(CaseError::MissingSection("bus"))?;
    let gen = gen.ok_or(CaseError::MissingSection("gen"))?;
    let branch = branch.ok_or(CaseError::MissingSection("branch"))?;
    let gencost = gencost.ok_or(CaseError::MissingSection("gencost"))?;

    check_uniform_width("bus", &bus, BUS_COLUMNS)?;
    check_uniform_width("gen", &gen, GEN_COLUMNS)?;
    check_uniform_width("branch", &branch, BRANCH_COLUMNS)?;

    let bus = bus
        .rows
        .iter()
        .map(|(line, r)| {
            Ok(BusRow {
                id: as_index("bus", *line, r[0])?,
                kind: as_index("bus", *line, r[1])? as u8,
                pd: r[2],
                qd: r[3],
                gs: r[4],
                bs: r[5],
                vm: r[7],
                va: r[8],
                vmax: r[11],
                vmin: r[12],
            })
        })
        .collect::<Result<Vec<_>, CaseError>>()?;
    let gen = gen
        .rows
        .iter()
        .map(|(line, r)| {
            Ok(GenRow {
                bus: as_index("gen", *line, r[0])?,
                pg: r[1],
                qg: r[2],
                qmax: r[3],
                qmin: r[4],
                vg: r[5],
                status: r[7] > 0.0,
                pmax: r[8],
                pmin: r[9],
            })
        })
        .collect::<Result<Vec<_>, CaseError>>()?;
    let branch = branch
        .rows
        .iter()
        .map(|(line, r)| {
            Ok(BranchRow {
                from: as_index("branch", *line, r[0])?,
                to: as_index("branch", *line, r[1])?,
                r: r[2],
                x: r[3],
                b: r[4],
                rate_a: r[5],
                tap: r[8],
                shift: r[9],
                status: r[10] > 0.0,
            })
        })
        .collect::<Result<Vec<_>, CaseError>>()?;
    let gencost = gencost
        .rows
        .iter()
        .map(|(line, r)| parse_gencost(*line, r))
        .collect::<Result<Vec<_>, CaseError>>()?;

    let raw = RawCase {
        base_mva,
        bus,
        gen,
        branch,
        gencost,
        checksum: hex::encode(Sha256::digest(text.as_bytes())),
    };
    raw.validate()?;
    Ok(raw)
}

fn check_uniform_width(section: &'static str, m: &Matrix, min: usize) -> Result<(), CaseError> {
    let Some((_, first)) = m.rows.first() else {
        return Ok(());
    };
    let width = first.len();
    for (line, row) in &m.rows {
        if row.len() != width {
            return Err(CaseError::MalformedRow {
                section,
                line: *line,
                reason: format!("row has {} columns, expected {width}", row.len()),
            });
        }
        if row.len() < min {
            return Err(CaseError::MalformedRow {
                section,
                line: *line,
                reason: format!("row has {} columns, need at least {min}", row.len()),
            });
        }
    }
    Ok(())
}

fn as_index(section: &'static str, line: usize, v: f64) -> Result<usize, CaseError> {
    if v >= 0.0 && v.fract() == 0.0 && v.is_finite() {
        Ok(v as usize)
    } else {
        Err(CaseError::MalformedRow {
            section,
            line,
            reason: format!("expected a nonnegative integer, got {v}"),
        })
    }
}

fn parse_gencost(line: usize, r: &[f64]) -> Result<GenCostRow, CaseError> {
    let malformed = |reason: String| CaseError::MalformedRow {
        section: "gencost",
        line,
        reason,
    };
    if r.len() < GENCOST_MIN_COLUMNS {
        return Err(malformed(format!(
            "row has {} columns, need at least {GENCOST_MIN_COLUMNS}",
            r.len()
        )));
    }
    let model = as_index("gencost", line, r[0])?;
    let n = as_index("gencost", line, r[3])?;
    let needed = match model {
        1 => 2 * n,
        2 => n,
        other => return Err(malformed(format!("unknown cost model {other}"))),
    };
    if r.len() < GENCOST_MIN_COLUMNS + needed {
        return Err(malformed(format!(
            "cost model {model} with n={n} needs {} columns, row has {}",
            GENCOST_MIN_COLUMNS + needed,
            r.len()
        )));
    }
    Ok(GenCostRow {
        model: model as u8,
        startup: r[1],
        shutdown: r[2],
        coeffs: r[GENCOST_MIN_COLUMNS..GENCOST_MIN_COLUMNS + needed].to_vec(),
    })
}

impl RawCase {
    fn validate(&self) -> Result<(), CaseError> {
        let mut ids = std::collections::HashSet::new();
        for b in &self.bus {
            if !ids.insert(b.id) {
                return Err(CaseError::DuplicateBusId(b.id));
            }
        }
        for g in &self.gen {
            if !ids.contains(&g.bus) {
                return Err(CaseError::UnknownBus {
                    section: "gen",
                    bus: g.bus,
                });
            }
        }
        for br in &self.branch {
            for bus in [br.from, br.to] {
                if !ids.contains(&bus) {
                    return Err(CaseError::UnknownBus {
                        section: "branch",
                        bus,
                    });
                }
            }
        }
        match self.bus.iter().filter(|b| b.kind == 3).count() {
            0 => return Err(CaseError::NoSlackBus),
            1 => {}
            n => return Err(CaseError::MultipleSlackBuses(n)),
        }
        if self.gencost.len() < self.gen.len() {
            return Err(CaseError::MalformedRow {
                section: "gencost",
                line: 0,
                reason: format!(
                    "{} cost rows for {} generators",
                    self.gencost.len(),
                    self.gen.len()
                ),
            });
        }
        Ok(())
    }
}
