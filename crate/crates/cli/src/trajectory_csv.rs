//! Trajectory CSV: `t, sqrtV, gammaX, X, active_agent, control_l1l2_norm,
//! x_1_1 … x_N_d, v_1_1 … v_N_d`.

use std::io::{Read, Write};

use flock_core::dynamics::Trajectory;
use flock_core::AgentCloud;

use crate::CliError;

/// One parsed row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub t: f64,
    pub sqrt_v: f64,
    pub gamma: f64,
    pub dispersion: f64,
    pub active_agent: Option<usize>,
    pub control_norm: f64,
    pub state: AgentCloud,
}

pub fn header(agents: usize, dim: usize) -> Vec<String> {
    let mut cols: Vec<String> = ["t", "sqrtV", "gammaX", "X", "active_agent", "control_l1l2_norm"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for prefix in ["x", "v"] {
        for i in 1..=agents {
            for j in 1..=dim {
                cols.push(format!("{prefix}_{i}_{j}"));
            }
        }
    }
    cols
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt(value: f64) -> String {
    format!("{value:.16e}")
}

pub fn write<W: Write>(traj: &Trajectory, out: W) -> Result<(), CliError> {
    let first = &traj.states[0];
    let (n, d) = (first.agents(), first.dim());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(n, d)).map_err(io)?;
    let mut record = Vec::with_capacity(6 + 2 * n * d);
    for k in 0..traj.len() {
        let g = &traj.diagnostics[k];
        let u = &traj.controls[k];
        let s = &traj.states[k];
        record.clear();
        record.push(fmt(traj.times[k]));
        record.push(fmt(g.sqrt_v()));
        record.push(fmt(g.gamma));
        record.push(fmt(g.dispersion));
        record.push(u.active_agent().map_or("-1".to_string(), |i| i.to_string()));
        record.push(fmt(u.l1l2_norm()));
        for m in [s.positions(), s.velocities()] {
            for i in 0..n {
                for j in 0..d {
                    record.push(fmt(m[(i, j)]));
                }
            }
        }
        w.write_record(&record).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))
}

pub fn write_file(traj: &Trajectory, path: &std::path::Path) -> Result<(), CliError> {
    let file = std::fs::File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    write(traj, std::io::BufWriter::new(file))
}

pub fn read<R: Read>(input: R) -> Result<Vec<CsvRow>, CliError> {
    let mut r = csv::Reader::from_reader(input);
    let head = r.headers().map_err(io)?.clone();
    let cols = head.len();
    if cols < 8 || (cols - 6) % 2 != 0 {
        return Err(CliError::Io(format!("unexpected column count {cols}")));
    }
    // recover N and d from the last position column name
    let half = (cols - 6) / 2;
    let last = &head[5 + half];
    let (n, d) = last
        .strip_prefix("x_")
        .and_then(|s| s.split_once('_'))
        .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
        .ok_or_else(|| CliError::Io(format!("bad column name '{last}'")))?;
    if n * d != half || head.iter().map(str::to_string).ne(header(n, d)) {
        return Err(CliError::Io("header does not match the trajectory layout".into()));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(io)?;
        let f = |i: usize| -> Result<f64, CliError> {
            rec[i]
                .parse::<f64>()
                .map_err(|_| CliError::Io(format!("bad number '{}'", &rec[i])))
        };
        let active: i64 = rec[4]
            .parse()
            .map_err(|_| CliError::Io(format!("bad agent index '{}'", &rec[4])))?;
        let values: Vec<f64> = (6..cols).map(f).collect::<Result<_, _>>()?;
        let state =
            AgentCloud::from_rows(n, d, &values[..half], &values[half..]).map_err(|e| CliError::Io(e.to_string()))?;
        rows.push(CsvRow {
            t: f(0)?,
            sqrt_v: f(1)?,
            gamma: f(2)?,
            dispersion: f(3)?,
            active_agent: usize::try_from(active).ok(),
            control_norm: f(5)?,
            state,
        });
    }
    Ok(rows)
}

pub fn read_file(path: &std::path::Path) -> Result<Vec<CsvRow>, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    read(std::io::BufReader::new(file))
}

fn io(e: csv::Error) -> CliError {
    CliError::Io(e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use flock_core::controls::SparseFeedback;
    use flock_core::dynamics::{integrate, IntegrationOptions};
    use flock_core::CommKernel;

    #[test]
    fn header_layout() {
        let h = header(2, 2);
        assert_eq!(
            h[..6],
            ["t", "sqrtV", "gammaX", "X", "active_agent", "control_l1l2_norm"]
        );
        assert_eq!(
            h[6..],
            ["x_1_1", "x_1_2", "x_2_1", "x_2_2", "v_1_1", "v_1_2", "v_2_1", "v_2_2"]
        );
    }

    #[test]
    fn values_round_trip_exactly() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 1e300, f64::MIN_POSITIVE, f64::INFINITY] {
            assert_eq!(fmt(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt(0.1), "1.0000000000000001e-1");
    }

    #[test]
    fn written_rows_read_back() {
        let k = CommKernel::cucker_smale(1.0, 1.0, 1.0).unwrap();
        let c = AgentCloud::from_rows(3, 1, &[0.0, 1.0, 2.5], &[1.5, -0.5, -1.2]).unwrap();
        let fb = SparseFeedback {
            kernel: k.clone(),
            budget: 1.0,
        };
        let traj = integrate(&c, &k, &fb, IntegrationOptions::sampled(1.0, 0.1, Some(0.01))).unwrap();
        let mut buf = Vec::new();
        write(&traj, &mut buf).unwrap();
        let rows = read(buf.as_slice()).unwrap();
        assert_eq!(rows.len(), traj.len());
        for (k, row) in rows.iter().enumerate() {
            assert_eq!(row.t, traj.times[k]);
            assert_eq!(row.sqrt_v, traj.diagnostics[k].sqrt_v());
            assert_eq!(row.state, traj.states[k]);
            assert_eq!(row.active_agent, traj.controls[k].active_agent());
        }
    }

    #[test]
    fn rejects_malformed_header() {
        assert!(read("t,sqrtV\n1,2\n".as_bytes()).is_err());
        assert!(read("t,sqrtV,gammaX,X,active_agent,control_l1l2_norm,x_1_1,x_2_1,v_1_1,v_9_1\n".as_bytes()).is_err());
    }
}
