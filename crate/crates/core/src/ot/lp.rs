//! Exact (unregularized) transport by the transportation simplex.

use super::OtError;

/// Largest number of atoms per side accepted by [`exact_ot_lp`].
pub const LP_MAX_ATOMS: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    /// Row-major optimal vertex plan.
    pub plan: Vec<f64>,
    pub cost: f64,
    /// True when every nonbasic reduced cost is strictly positive, which
    /// guarantees the optimal plan is unique.
    pub unique: bool,
    pub pivots: usize,
}

const FLOW_TOL: f64 = 1e-13;
const COST_TOL: f64 = 1e-12;
const UNIQUE_MARGIN: f64 = 1e-9;

/// Minimizes `sum P_ij C_ij` over couplings of `a` and `b`. Both marginals
/// are rescaled to unit mass; zero entries are allowed.
pub fn exact_ot_lp(a: &[f64], b: &[f64], c: &[f64]) -> Result<LpSolution, OtError> {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return Err(OtError::Empty);
    }
    if n.max(m) > LP_MAX_ATOMS {
        return Err(OtError::TooLarge { max: LP_MAX_ATOMS, found: n.max(m) });
    }
    if c.len() != n * m {
        return Err(OtError::Shape(format!("cost has {} entries, expected {}x{}", c.len(), n, m)));
    }
    for (name, w) in [("a", a), ("b", b)] {
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(OtError::BadMarginal(name));
        }
    }
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    let a: Vec<f64> = a.iter().map(|v| v / sa).collect();
    let b: Vec<f64> = b.iter().map(|v| v / sb).collect();

    let mut flow = vec![0.0; n * m];
    let mut basic = vec![false; n * m];
    northwest_corner(&a, &b, &mut flow, &mut basic);

    let max_pivots = 10_000;
    let mut pivots = 0;
    loop {
        let (u, v) = duals(n, m, c, &basic);
        let entering = (0..n * m).find(|&k| !basic[k] && c[k] - u[k / m] - v[k % m] < -COST_TOL);
        let Some(enter) = entering else {
            let unique = (0..n * m).all(|k| basic[k] || c[k] - u[k / m] - v[k % m] > UNIQUE_MARGIN);
            let cost = flow.iter().zip(c).map(|(x, c)| x * c).sum();
            return Ok(LpSolution { plan: flow, cost, unique, pivots });
        };
        pivots += 1;
        if pivots > max_pivots {
            return Err(OtError::Cycling);
        }
        let cycle = basis_path(n, m, &basic, enter);
        // cycle[0] is adjacent to the entering column and loses flow
        let theta = cycle.iter().step_by(2).map(|&k| flow[k]).fold(f64::INFINITY, f64::min);
        let leave = cycle.iter().step_by(2).copied().filter(|&k| flow[k] <= theta + FLOW_TOL).min().expect("cycle has a minus cell");
        for (pos, &k) in cycle.iter().enumerate() {
            if pos % 2 == 0 {
                flow[k] = (flow[k] - theta).max(0.0);
            } else {
                flow[k] += theta;
            }
        }
        flow[enter] = theta;
        flow[leave] = 0.0;
        basic[enter] = true;
        basic[leave] = false;
    }
}

fn northwest_corner(a: &[f64], b: &[f64], flow: &mut [f64], basic: &mut [bool]) {
    let (n, m) = (a.len(), b.len());
    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    let (mut i, mut j) = (0, 0);
    loop {
        let q = supply[i].min(demand[j]);
        flow[i * m + j] = q;
        basic[i * m + j] = true;
        supply[i] -= q;
        demand[j] -= q;
        if i == n - 1 && j == m - 1 {
            // absorb rounding left over from the rescaling
            flow[i * m + j] += supply[i].max(demand[j]).max(0.0);
            break;
        }
        if i == n - 1 {
            j += 1;
        } else if j == m - 1 || supply[i] <= demand[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
}

/// Solves `u_i + v_j = C_ij` on the basis tree with `u_0 = 0`.
fn duals(n: usize, m: usize, c: &[f64], basic: &[bool]) -> (Vec<f64>, Vec<f64>) {
    let mut u = vec![f64::NAN; n];
    let mut v = vec![f64::NAN; m];
    u[0] = 0.0;
    let mut changed = true;
    while changed {
        changed = false;
        for k in (0..n * m).filter(|&k| basic[k]) {
            let (i, j) = (k / m, k % m);
            if u[i].is_nan() && !v[j].is_nan() {
                u[i] = c[k] - v[j];
                changed = true;
            } else if v[j].is_nan() && !u[i].is_nan() {
                v[j] = c[k] - u[i];
                changed = true;
            }
        }
    }
    (u, v)
}

/// Path of basic cells from the entering cell's column back to its row,
/// i.e. the entering cell's cycle without the entering cell itself.
fn basis_path(n: usize, m: usize, basic: &[bool], enter: usize) -> Vec<usize> {
    // nodes: rows 0..n, columns n..n+m
    let (ei, ej) = (enter / m, enter % m);
    let start = n + ej;
    let goal = ei;
    let mut prev: Vec<Option<(usize, usize)>> = vec![None; n + m];
    let mut seen = vec![false; n + m];
    let mut queue = std::collections::VecDeque::from([start]);
    seen[start] = true;
    while let Some(node) = queue.pop_front() {
        if node == goal {
            break;
        }
        let neighbors: Vec<(usize, usize)> = if node < n {
            (0..m).filter(|&j| basic[node * m + j]).map(|j| (n + j, node * m + j)).collect()
        } else {
            let j = node - n;
            (0..n).filter(|&i| basic[i * m + j]).map(|i| (i, i * m + j)).collect()
        };
        for (next, cell) in neighbors {
            if !seen[next] {
                seen[next] = true;
                prev[next] = Some((node, cell));
                queue.push_back(next);
            }
        }
    }
    let mut path = Vec::new();
    let mut node = goal;
    while node != start {
        let (p, cell) = prev[node].expect("basis is a spanning tree");
        path.push(cell);
        node = p;
    }
    path.reverse();
    path
}
