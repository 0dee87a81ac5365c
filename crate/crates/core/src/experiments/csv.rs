//! CSV writers. Floats use the shortest representation that parses back to
//! the same bits.

use std::fmt::Write as _;

use crate::dkf::MonteCarloResult;
use crate::network::{eigen_error_metrics, RoundHistory};

use super::ExperimentError;

pub const CONSENSUS_HEADER: &str = "k,node,eig_index,q_node,q_star,abs_err,f_node,f_star";
pub const DKF_HEADER: &str = "k,filter,mse";
pub const ORACLE_HEADER: &str = "instance,n_nodes,dim,grid_step,f_solver,f_grid,abs_dev,solver_iters,grid_points,pass";

/// One row per round `k ≥ 1` carrying an oracle solution, node and sorted
/// eigenvalue. Nodes and eigenvalue indices are 1-based.
pub fn consensus_csv(history: &RoundHistory) -> Result<String, ExperimentError> {
    let errors = eigen_error_metrics(history);
    let mut out = String::new();
    writeln!(out, "{CONSENSUS_HEADER}").unwrap();
    let mut rows = 0usize;
    for e in errors.iter().filter(|e| e.k >= 1) {
        let r = &history.rounds[e.k];
        let oracle = r.oracle.as_ref().expect("error rows come from oracle rounds");
        for (i, eig) in r.eig_node.iter().enumerate() {
            for (j, q) in eig.iter().enumerate() {
                writeln!(
                    out,
                    "{},{},{},{:?},{:?},{:?},{:?},{:?}",
                    e.k,
                    i + 1,
                    j + 1,
                    q,
                    oracle.eig_star[j],
                    e.per_node[i][j],
                    r.f_node[i],
                    oracle.f_star
                )
                .unwrap();
                rows += 1;
            }
        }
    }
    if rows == 0 {
        return Err(ExperimentError::EmptyData("history has no evaluated rounds"));
    }
    Ok(out)
}

/// Run-averaged MSE curves of the three filters.
pub fn dkf_csv(result: &MonteCarloResult) -> Result<String, ExperimentError> {
    if result.mse_centralized.is_empty() {
        return Err(ExperimentError::EmptyData("no filter steps"));
    }
    let mut out = String::new();
    writeln!(out, "{DKF_HEADER}").unwrap();
    let curves = [
        ("centralized", &result.mse_centralized),
        ("proposed", &result.mse_proposed),
        ("cdkf", &result.mse_cdkf),
    ];
    for k in 0..result.mse_centralized.len() {
        for (name, curve) in curves {
            writeln!(out, "{k},{name},{:?}", curve[k]).unwrap();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleRow {
    pub instance: usize,
    pub n_nodes: usize,
    pub dim: usize,
    pub grid_step: f64,
    pub f_solver: f64,
    pub f_grid: f64,
    pub solver_iters: usize,
    pub grid_points: usize,
    pub pass: bool,
}

pub fn oracle_csv(rows: &[OracleRow]) -> Result<String, ExperimentError> {
    if rows.is_empty() {
        return Err(ExperimentError::EmptyData("no oracle instances"));
    }
    let mut out = String::new();
    writeln!(out, "{ORACLE_HEADER}").unwrap();
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:?},{:?},{:?},{:?},{},{},{}",
            r.instance,
            r.n_nodes,
            r.dim,
            r.grid_step,
            r.f_solver,
            r.f_grid,
            (r.f_solver - r.f_grid).abs(),
            r.solver_iters,
            r.grid_points,
            r.pass
        )
        .unwrap();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{run_simulation, Graph, InputTrajectory, SimOptions};
    use crate::lowner_john::ThetaMode;
    use crate::objective::ObjectiveKind;
    use crate::psd::SymMat;

    fn history(n: usize, rounds: usize, oracle_every: usize) -> RoundHistory {
        let edges: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
        let graph = Graph::new(n, &edges).unwrap();
        let traj: Vec<_> = (0..n)
            .map(|i| InputTrajectory::Static {
                p0: SymMat::from_diagonal(&[1.0 + i as f64, 2.0]),
            })
            .collect();
        let opts = SimOptions {
            oracle_every,
            ..Default::default()
        };
        run_simulation(&graph, &traj, ThetaMode::Fixed(1.0), ObjectiveKind::NegLogDet, rounds, &opts).unwrap()
    }

    #[test]
    fn single_node_single_round_has_two_rows() {
        let csv = consensus_csv(&history(1, 1, 1)).unwrap();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], CONSENSUS_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,1,1,"));
        assert!(lines[2].starts_with("1,1,2,"));
    }

    #[test]
    fn history_without_evaluated_rounds_is_an_error() {
        assert!(matches!(consensus_csv(&history(2, 1, 0)), Err(ExperimentError::EmptyData(_))));
        let empty = MonteCarloResult {
            mse_centralized: vec![],
            mse_proposed: vec![],
            mse_cdkf: vec![],
            clamp_count: 0,
            fallback_count: 0,
            max_disagreement: 0.0,
        };
        assert!(dkf_csv(&empty).is_err());
        assert!(oracle_csv(&[]).is_err());
    }

    #[test]
    fn floats_round_trip() {
        let csv = consensus_csv(&history(3, 2, 1)).unwrap();
        let h = history(3, 2, 1);
        let line = csv.lines().nth(1).unwrap();
        let q: f64 = line.split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(q.to_bits(), h.rounds[1].eig_node[0][0].to_bits());
    }

    #[test]
    fn dkf_rows_per_step_and_filter() {
        let r = MonteCarloResult {
            mse_centralized: vec![1.0, 0.5],
            mse_proposed: vec![2.0, 0.75],
            mse_cdkf: vec![3.0, 1.0 / 3.0],
            clamp_count: 0,
            fallback_count: 0,
            max_disagreement: 0.0,
        };
        let csv = dkf_csv(&r).unwrap();
        assert_eq!(csv.lines().count(), 7);
        assert_eq!(csv.lines().last().unwrap(), "1,cdkf,0.3333333333333333");
    }
}
