//! Independent oracles and helpers shared by the integration suites.
//!
//! Everything here deliberately avoids the code paths it is used to check:
//! the QP solver is a dense projected-gradient ascent, the tau counter is
//! the naive O(n^2) loop, and the eigensolver is a cyclic Jacobi sweep.

#![allow(dead_code)]

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

// ---------------------------------------------------------------------------
// Dense nu-SVR dual oracle: projected gradient ascent over the split
// variables, with both group sums pinned at C*nu/2. Pinning is lossless
// because the objective depends only on beta = a - a*, and any feasible
// point can absorb extra mass symmetrically without leaving the box.
// ---------------------------------------------------------------------------

pub struct QpOracleSolution {
    pub alpha: Vec<f64>,
    pub alpha_star: Vec<f64>,
    pub weight: Vec<f64>,
    pub bias: f64,
    pub objective: f64,
}

/// Evaluates the dual objective -1/2 b'Qb + y'b for split variables.
pub fn dual_objective(x: &[Vec<f64>], y: &[f64], alpha: &[f64], alpha_star: &[f64]) -> f64 {
    let n = y.len();
    let beta: Vec<f64> = (0..n).map(|i| alpha[i] - alpha_star[i]).collect();
    let d = x[0].len();
    // quadratic term through w = X' beta keeps this O(n d)
    let mut w = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            w[j] += beta[i] * x[i][j];
        }
    }
    let quad: f64 = w.iter().map(|v| v * v).sum();
    let linear: f64 = beta.iter().zip(y).map(|(b, yi)| b * yi).sum();
    -0.5 * quad + linear
}

/// Euclidean projection onto { z in [0, cap]^n : sum z = s } by bisection
/// on the simplex shift.
fn project_capped_simplex(z: &[f64], cap: f64, s: f64) -> Vec<f64> {
    let f = |lambda: f64| -> f64 {
        z.iter().map(|&v| (v - lambda).clamp(0.0, cap)).sum()
    };
    let mut lo = z.iter().cloned().fold(f64::INFINITY, f64::min) - cap;
    let mut hi = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > s {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let lambda = 0.5 * (lo + hi);
    z.iter().map(|&v| (v - lambda).clamp(0.0, cap)).collect()
}

fn gram(x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut q = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let dot: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| a * b).sum();
            q[i][j] = dot;
            q[j][i] = dot;
        }
    }
    q
}

fn largest_eigenvalue(q: &[Vec<f64>]) -> f64 {
    let n = q.len();
    let mut v = vec![1.0; n];
    let mut lambda = 0.0;
    for _ in 0..200 {
        let mut next = vec![0.0; n];
        for i in 0..n {
            for j in 0..n {
                next[i] += q[i][j] * v[j];
            }
        }
        let norm: f64 = next.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-300 {
            return 1e-12;
        }
        for a in &mut next {
            *a /= norm;
        }
        lambda = norm;
        v = next;
    }
    lambda.max(1e-12)
}

fn qp_gradient(q: &[Vec<f64>], y: &[f64], alpha: &[f64], alpha_star: &[f64]) -> Vec<f64> {
    let n = y.len();
    let beta: Vec<f64> = (0..n).map(|i| alpha[i] - alpha_star[i]).collect();
    let mut grad = y.to_vec();
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            acc += q[i][j] * beta[j];
        }
        grad[i] -= acc;
    }
    grad
}

/// Solves the nu-SVR dual to tight convergence by accelerated projected
/// gradient ascent with function-value restarts. Terminates when the
/// projected-gradient mapping certifies near-stationarity. Independent of
/// the SMO implementation under test.
pub fn solve_nu_svr_qp(x: &[Vec<f64>], y: &[f64], c: f64, nu: f64) -> QpOracleSolution {
    let n = y.len();
    let cap = c / n as f64;
    let target = c * nu / 2.0;
    let q = gram(x);
    let eta = 1.0 / (2.05 * largest_eigenvalue(&q));
    let y_scale = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let pg_tol = 1e-10 * (1.0 + y_scale);

    let step = |u: &[f64], v: &[f64], g: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let up: Vec<f64> = u.iter().zip(g).map(|(a, gi)| a + eta * gi).collect();
        let down: Vec<f64> = v.iter().zip(g).map(|(a, gi)| a - eta * gi).collect();
        (
            project_capped_simplex(&up, cap, target),
            project_capped_simplex(&down, cap, target),
        )
    };

    let mut xu = vec![target / n as f64; n];
    let mut xv = xu.clone();
    let mut zu = xu.clone();
    let mut zv = xv.clone();
    let mut t = 1.0f64;
    let mut obj_x = dual_objective(x, y, &xu, &xv);

    for iter in 0..300_000usize {
        let g = qp_gradient(&q, y, &zu, &zv);
        let (cu, cv) = step(&zu, &zv, &g);
        let obj_c = dual_objective(x, y, &cu, &cv);
        if obj_c >= obj_x {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            let momentum = (t - 1.0) / t_next;
            zu = cu.iter().zip(&xu).map(|(c, p)| c + momentum * (c - p)).collect();
            zv = cv.iter().zip(&xv).map(|(c, p)| c + momentum * (c - p)).collect();
            xu = cu;
            xv = cv;
            obj_x = obj_c;
            t = t_next;
        } else {
            // momentum overshot: restart from the plain iterate
            t = 1.0;
            zu = xu.clone();
            zv = xv.clone();
        }

        if iter % 50 == 49 {
            let g = qp_gradient(&q, y, &xu, &xv);
            let (mu, mv) = step(&xu, &xv, &g);
            let residual = mu
                .iter()
                .zip(&xu)
                .chain(mv.iter().zip(&xv))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max)
                / eta;
            if residual <= pg_tol {
                break;
            }
        }
    }

    let d = x[0].len();
    let mut weight = vec![0.0; d];
    for i in 0..n {
        let beta = xu[i] - xv[i];
        for j in 0..d {
            weight[j] += beta * x[i][j];
        }
    }
    let grad = qp_gradient(&q, y, &xu, &xv);
    let r1 = oracle_multiplier(&xu, &grad, cap, false);
    let r2 = oracle_multiplier(&xv, &grad, cap, true);
    let objective = dual_objective(x, y, &xu, &xv);
    QpOracleSolution {
        bias: 0.5 * (r1 + r2),
        alpha: xu,
        alpha_star: xv,
        weight,
        objective,
    }
}

/// KKT multiplier recovery for the oracle solution. Iterates are only
/// approximately at their bounds, so classification uses a small margin.
fn oracle_multiplier(alpha: &[f64], grad: &[f64], cap: f64, starred: bool) -> f64 {
    let margin = cap * 1e-6;
    let mut free_sum = 0.0;
    let mut free_count = 0usize;
    let mut lower = f64::NEG_INFINITY;
    let mut upper = f64::INFINITY;
    for (i, &v) in alpha.iter().enumerate() {
        let g = grad[i];
        if v > margin && v < cap - margin {
            free_sum += g;
            free_count += 1;
        } else if (v <= margin) != starred {
            lower = lower.max(g);
        } else {
            upper = upper.min(g);
        }
    }
    if free_count > 0 {
        free_sum / free_count as f64
    } else if lower.is_finite() && upper.is_finite() {
        0.5 * (lower + upper)
    } else if lower.is_finite() {
        lower
    } else {
        upper
    }
}

// ---------------------------------------------------------------------------
// Brute-force Kendall tau-b: count every pair.
// ---------------------------------------------------------------------------

/// O(n^2) tau-b: (P - Q) / sqrt((P + Q + T)(P + Q + U)), pairs tied in both
/// lists counted in neither tie term. Returns None when undefined.
pub fn brute_force_tau_b(y: &[f64], yhat: &[f64]) -> Option<f64> {
    use std::cmp::Ordering;
    let n = y.len();
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    let mut tie_y_only = 0i64;
    let mut tie_yhat_only = 0i64;
    for i in 0..n {
        for j in (i + 1)..n {
            let dy = y[i].total_cmp(&y[j]);
            let dh = yhat[i].total_cmp(&yhat[j]);
            match (dy == Ordering::Equal, dh == Ordering::Equal) {
                // tied in both: counts in neither tie term
                (true, true) => {}
                (true, false) => tie_y_only += 1,
                (false, true) => tie_yhat_only += 1,
                (false, false) => {
                    if dy == dh {
                        concordant += 1;
                    } else {
                        discordant += 1;
                    }
                }
            }
        }
    }
    let p = concordant;
    let q = discordant;
    let d1 = p + q + tie_y_only;
    let d2 = p + q + tie_yhat_only;
    if d1 == 0 || d2 == 0 {
        return None;
    }
    Some(((p - q) as f64 / ((d1 as f64) * (d2 as f64)).sqrt()).clamp(-1.0, 1.0))
}

// ---------------------------------------------------------------------------
// Cyclic Jacobi eigendecomposition of a symmetric matrix.
// ---------------------------------------------------------------------------

/// Returns (eigenvalues, eigenvectors) sorted by descending eigenvalue;
/// eigenvectors\[k\] is the unit eigenvector of eigenvalues\[k\].
pub fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..200 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[p][q] * a[p][q];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let cos = 1.0 / (t * t + 1.0).sqrt();
                let sin = t * cos;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = cos * akp - sin * akq;
                    a[k][q] = sin * akp + cos * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = cos * apk - sin * aqk;
                    a[q][k] = sin * apk + cos * aqk;
                }
                for k in 0..n {
                    let vkp = v[k][p];
                    let vkq = v[k][q];
                    v[k][p] = cos * vkp - sin * vkq;
                    v[k][q] = sin * vkp + cos * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].partial_cmp(&a[i][i]).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a[i][i]).collect();
    let eigenvectors: Vec<Vec<f64>> = order
        .iter()
        .map(|&col| (0..n).map(|row| v[row][col]).collect())
        .collect();
    (eigenvalues, eigenvectors)
}

// ---------------------------------------------------------------------------
// Minimal scripted HTTP stub server for endpoint tests.
// ---------------------------------------------------------------------------

/// What the stub returns for one request, in order. The last entry repeats.
#[derive(Clone)]
pub enum StubResponse {
    /// 200 with body {"text": ...}
    Text(String),
    /// Arbitrary status with an empty JSON body.
    Status(u16),
    /// 200 with a raw body.
    Raw(String),
    /// Sleeps before answering, to trip client timeouts.
    Hang(u64),
}

pub struct StubServer {
    pub base_url: String,
    requests: Arc<AtomicUsize>,
    bodies: Arc<Mutex<Vec<String>>>,
    stop: Arc<AtomicBool>,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl StubServer {
    pub fn start(script: Vec<StubResponse>) -> StubServer {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub server");
        listener.set_nonblocking(true).unwrap();
        let addr = listener.local_addr().unwrap();
        let requests = Arc::new(AtomicUsize::new(0));
        let bodies = Arc::new(Mutex::new(Vec::new()));
        let stop = Arc::new(AtomicBool::new(false));

        let thread_requests = requests.clone();
        let thread_bodies = bodies.clone();
        let thread_stop = stop.clone();
        let handle = std::thread::spawn(move || {
            while !thread_stop.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let served = thread_requests.fetch_add(1, Ordering::SeqCst);
                        let response = script
                            .get(served)
                            .or_else(|| script.last())
                            .cloned()
                            .unwrap_or(StubResponse::Status(500));
                        if let Some(body) = serve_one(stream, &response) {
                            thread_bodies.lock().unwrap().push(body);
                        }
                    }
                    Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        std::thread::sleep(Duration::from_millis(2));
                    }
                    Err(_) => break,
                }
            }
        });

        StubServer {
            base_url: format!("http://{addr}"),
            requests,
            bodies,
            stop,
            handle: Some(handle),
        }
    }

    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }

    pub fn request_bodies(&self) -> Vec<String> {
        self.bodies.lock().unwrap().clone()
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn serve_one(mut stream: TcpStream, response: &StubResponse) -> Option<String> {
    stream
        .set_read_timeout(Some(Duration::from_secs(5)))
        .ok()?;
    let mut raw = Vec::new();
    let mut buf = [0u8; 4096];
    let body_start;
    loop {
        let n = stream.read(&mut buf).ok()?;
        if n == 0 {
            return None;
        }
        raw.extend_from_slice(&buf[..n]);
        if let Some(pos) = find_header_end(&raw) {
            body_start = pos;
            break;
        }
        if raw.len() > 1 << 20 {
            return None;
        }
    }
    let headers = String::from_utf8_lossy(&raw[..body_start]).to_string();
    let content_length = headers
        .lines()
        .find_map(|l| {
            let (name, value) = l.split_once(':')?;
            name.trim().eq_ignore_ascii_case("content-length").then(|| value.trim().parse::<usize>().ok())?
        })
        .unwrap_or(0);
    while raw.len() - body_start < content_length {
        let n = stream.read(&mut buf).ok()?;
        if n == 0 {
            break;
        }
        raw.extend_from_slice(&buf[..n]);
    }
    let body = String::from_utf8_lossy(&raw[body_start..]).to_string();

    let (status_line, payload) = match response {
        StubResponse::Text(text) => (
            "HTTP/1.1 200 OK".to_string(),
            serde_json::json!({ "text": text }).to_string(),
        ),
        StubResponse::Status(code) => (format!("HTTP/1.1 {code} STUB"), "{}".to_string()),
        StubResponse::Raw(raw) => ("HTTP/1.1 200 OK".to_string(), raw.clone()),
        StubResponse::Hang(ms) => {
            std::thread::sleep(Duration::from_millis(*ms));
            ("HTTP/1.1 200 OK".to_string(), "{}".to_string())
        }
    };
    let reply = format!(
        "{status_line}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
    stream.write_all(reply.as_bytes()).ok()?;
    let _ = stream.flush();
    Some(body)
}

fn find_header_end(raw: &[u8]) -> Option<usize> {
    raw.windows(4).position(|w| w == b"\r\n\r\n").map(|p| p + 4)
}
