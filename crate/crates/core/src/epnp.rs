//! EPnP: O(n) perspective-n-point pose estimation.
//!
//! Control-point formulation: the world points are expressed as barycentric
//! combinations of 4 control points (centroid + principal directions), the
//! camera-frame control points live in the null space of the 2n x 12
//! projection constraint matrix, and the combination coefficients (betas) are
//! recovered in closed form from inter-control-point distances, then refined
//! by Gauss-Newton. A final Gauss-Newton polish on the rotation vector and
//! translation minimizes reprojection error directly.
//!
//! Image points are expected in normalized camera coordinates
//! (x = (u - cx) / f, y = (v - cy) / f).

use nalgebra::{DMatrix, Matrix3, SMatrix, SVector, Vector3, Vector6, SVD};

use crate::error::{AlignError, Result};

/// Rodrigues: rotation vector to rotation matrix.
pub fn rotvec_to_matrix(r: &Vector3<f64>) -> Matrix3<f64> {
    let theta = r.norm();
    if theta < 1e-12 {
        return Matrix3::identity();
    }
    let axis = r / theta;
    let k = Matrix3::new(
        0.0, -axis.z, axis.y, //
        axis.z, 0.0, -axis.x, //
        -axis.y, axis.x, 0.0,
    );
    Matrix3::identity() + k * theta.sin() + k * k * (1.0 - theta.cos())
}

/// Log map: rotation matrix to rotation vector with magnitude in [0, pi].
pub fn matrix_to_rotvec(m: &Matrix3<f64>) -> Vector3<f64> {
    let trace = m.trace();
    let cos_theta = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    if theta < 1e-12 {
        return Vector3::zeros();
    }
    if (std::f64::consts::PI - theta) < 1e-6 {
        // Near pi: extract axis from the symmetric part.
        let a = (m + Matrix3::identity()) / 2.0;
        let axis = Vector3::new(
            a[(0, 0)].max(0.0).sqrt(),
            a[(1, 1)].max(0.0).sqrt() * if a[(0, 1)] >= 0.0 { 1.0 } else { -1.0 },
            a[(2, 2)].max(0.0).sqrt() * if a[(0, 2)] >= 0.0 { 1.0 } else { -1.0 },
        );
        return axis.normalize() * theta;
    }
    let axis = Vector3::new(
        m[(2, 1)] - m[(1, 2)],
        m[(0, 2)] - m[(2, 0)],
        m[(1, 0)] - m[(0, 1)],
    ) / (2.0 * theta.sin());
    axis * theta
}

fn control_points(world: &[Vector3<f64>]) -> Result<[Vector3<f64>; 4]> {
    let n = world.len() as f64;
    let centroid = world.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for p in world {
        let d = p - centroid;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = cov.symmetric_eigen();
    // Principal directions scaled by sqrt eigenvalue; a vanishing direction
    // still gets a small extent so the barycentric system stays invertible.
    let spread = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    if spread <= 0.0 {
        return Err(AlignError::DegenerateFiducials {
            reason: "coincident 3D points".into(),
        });
    }
    let floor = (spread * 1e-6).sqrt();
    let mut cps = [centroid; 4];
    for k in 0..3 {
        let scale = eig.eigenvalues[k].max(0.0).sqrt().max(floor);
        cps[k + 1] = centroid + eig.eigenvectors.column(k) * scale;
    }
    Ok(cps)
}

fn barycentric(world: &[Vector3<f64>], cps: &[Vector3<f64>; 4]) -> Result<Vec<[f64; 4]>> {
    // Solve [c1..c4; 1..1] alpha = [p; 1] for each point.
    let mut basis = SMatrix::<f64, 4, 4>::zeros();
    for j in 0..4 {
        basis[(0, j)] = cps[j].x;
        basis[(1, j)] = cps[j].y;
        basis[(2, j)] = cps[j].z;
        basis[(3, j)] = 1.0;
    }
    let inv = basis.try_inverse().ok_or(AlignError::DegenerateFiducials {
        reason: "degenerate control point basis".into(),
    })?;
    Ok(world
        .iter()
        .map(|p| {
            let alpha = inv * SVector::<f64, 4>::new(p.x, p.y, p.z, 1.0);
            [alpha[0], alpha[1], alpha[2], alpha[3]]
        })
        .collect())
}

/// Rigid transform world->camera from matched point sets (no scale).
fn horn_alignment(world: &[Vector3<f64>], camera: &[Vector3<f64>]) -> (Matrix3<f64>, Vector3<f64>) {
    let n = world.len() as f64;
    let cw = world.iter().sum::<Vector3<f64>>() / n;
    let cc = camera.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (w, c) in world.iter().zip(camera.iter()) {
        h += (c - cc) * (w - cw).transpose();
    }
    let svd = SVD::new(h, true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * vt;
    }
    let t = cc - r * cw;
    (r, t)
}

struct DistanceSystem {
    /// Rows of the linearized distance constraints over
    /// [b11, b12, b13, b14, b22, b23, b24, b33, b34, b44].
    l: SMatrix<f64, 6, 10>,
    /// Squared world distances between control point pairs.
    rho: Vector6<f64>,
}

const PAIRS: [(usize, usize); 6] = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)];

fn distance_system(v: &[Vector3<f64>; 16], cps: &[Vector3<f64>; 4]) -> DistanceSystem {
    // v holds the 4 null-space candidates, each as 4 control point vectors:
    // v[k * 4 + j] is candidate k's j-th control point.
    let mut l = SMatrix::<f64, 6, 10>::zeros();
    let mut rho = Vector6::zeros();
    for (row, &(a, b)) in PAIRS.iter().enumerate() {
        let dv: Vec<Vector3<f64>> = (0..4).map(|k| v[k * 4 + a] - v[k * 4 + b]).collect();
        let mut col = 0;
        for i in 0..4 {
            for j in i..4 {
                let factor = if i == j { 1.0 } else { 2.0 };
                l[(row, col)] = factor * dv[i].dot(&dv[j]);
                col += 1;
            }
        }
        rho[row] = (cps[a] - cps[b]).norm_squared();
    }
    DistanceSystem { l, rho }
}

fn beta_index(i: usize, j: usize) -> usize {
    // Index into the 10-vector of b_ij, i <= j.
    const OFFSET: [usize; 4] = [0, 4, 7, 9];
    OFFSET[i] + (j - i)
}

fn betas_case1(sys: &DistanceSystem) -> [f64; 4] {
    // Only beta1 nonzero: b11 column.
    let mut num = 0.0;
    let mut den = 0.0;
    for row in 0..6 {
        num += sys.l[(row, beta_index(0, 0))] * sys.rho[row];
        den += sys.l[(row, beta_index(0, 0))].powi(2);
    }
    let b11 = num / den;
    [b11.max(0.0).sqrt(), 0.0, 0.0, 0.0]
}

fn betas_case2(sys: &DistanceSystem) -> [f64; 4] {
    // beta1, beta2 nonzero: columns b11, b12, b22.
    let cols = [beta_index(0, 0), beta_index(0, 1), beta_index(1, 1)];
    let mut a = DMatrix::<f64>::zeros(6, 3);
    for row in 0..6 {
        for (k, &c) in cols.iter().enumerate() {
            a[(row, k)] = sys.l[(row, c)];
        }
    }
    let sol = lstsq(&a, &DMatrix::from_column_slice(6, 1, sys.rho.as_slice()));
    let (b11, b12, b22) = (sol[0], sol[1], sol[2]);
    let b1 = b11.max(0.0).sqrt();
    let mut b2 = b22.max(0.0).sqrt();
    if b12 < 0.0 {
        b2 = -b2;
    }
    [b1, b2, 0.0, 0.0]
}

fn betas_case3(sys: &DistanceSystem) -> [f64; 4] {
    // beta1..beta3 nonzero: columns b11, b12, b13, b22, b23, b33.
    let cols = [
        beta_index(0, 0),
        beta_index(0, 1),
        beta_index(0, 2),
        beta_index(1, 1),
        beta_index(1, 2),
        beta_index(2, 2),
    ];
    let mut a = DMatrix::<f64>::zeros(6, 6);
    for row in 0..6 {
        for (k, &c) in cols.iter().enumerate() {
            a[(row, k)] = sys.l[(row, c)];
        }
    }
    let sol = lstsq(&a, &DMatrix::from_column_slice(6, 1, sys.rho.as_slice()));
    let b1 = sol[0].max(0.0).sqrt();
    let sign = |v: f64| if v < 0.0 { -1.0 } else { 1.0 };
    let b2 = sol[3].max(0.0).sqrt() * sign(sol[1]);
    let b3 = sol[5].max(0.0).sqrt() * sign(sol[2]);
    [b1, b2, b3, 0.0]
}

fn lstsq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Vec<f64> {
    let svd = a.clone().svd(true, true);
    svd.solve(b, 1e-12)
        .map(|m| m.column(0).iter().cloned().collect())
        .unwrap_or_else(|_| vec![0.0; a.ncols()])
}

/// Gauss-Newton refinement of the betas on the distance constraints.
fn refine_betas(sys: &DistanceSystem, betas: &mut [f64; 4]) {
    for _ in 0..8 {
        let mut jac = SMatrix::<f64, 6, 4>::zeros();
        let mut residual = Vector6::zeros();
        for row in 0..6 {
            let mut value = 0.0;
            for i in 0..4 {
                for j in i..4 {
                    value += sys.l[(row, beta_index(i, j))] * betas[i] * betas[j];
                }
            }
            residual[row] = sys.rho[row] - value;
            for k in 0..4 {
                let mut d = 0.0;
                for i in 0..4 {
                    let (lo, hi) = if i <= k { (i, k) } else { (k, i) };
                    let factor = if i == k { 2.0 } else { 1.0 };
                    d += factor * sys.l[(row, beta_index(lo, hi))] * betas[i];
                }
                jac[(row, k)] = d;
            }
        }
        let jtj = jac.transpose() * jac;
        let jtr = jac.transpose() * residual;
        if let Some(delta) = jtj.lu().solve(&jtr) {
            for k in 0..4 {
                betas[k] += delta[k];
            }
        } else {
            break;
        }
    }
}

fn camera_points_from_betas(
    v: &[Vector3<f64>; 16],
    betas: &[f64; 4],
    alphas: &[[f64; 4]],
) -> Vec<Vector3<f64>> {
    let mut ccs = [Vector3::zeros(); 4];
    for j in 0..4 {
        for k in 0..4 {
            ccs[j] += v[k * 4 + j] * betas[k];
        }
    }
    let mut points: Vec<Vector3<f64>> = alphas
        .iter()
        .map(|a| (0..4).map(|j| ccs[j] * a[j]).sum())
        .collect();
    // Resolve the global sign so depths are positive.
    let mean_z: f64 = points.iter().map(|p| p.z).sum::<f64>() / points.len() as f64;
    if mean_z < 0.0 {
        for p in &mut points {
            *p = -*p;
        }
    }
    points
}

fn reprojection_rms(
    world: &[Vector3<f64>],
    image: &[[f64; 2]],
    r: &Matrix3<f64>,
    t: &Vector3<f64>,
) -> f64 {
    let mut sum = 0.0;
    for (w, uv) in world.iter().zip(image.iter()) {
        let c = r * w + t;
        if c.z <= 1e-9 {
            return f64::INFINITY;
        }
        sum += (c.x / c.z - uv[0]).powi(2) + (c.y / c.z - uv[1]).powi(2);
    }
    (sum / world.len() as f64).sqrt()
}

/// Gauss-Newton on (rotation vector, translation) minimizing reprojection
/// error in normalized image coordinates.
fn polish_pose(
    world: &[Vector3<f64>],
    image: &[[f64; 2]],
    r: &mut Matrix3<f64>,
    t: &mut Vector3<f64>,
) {
    let n = world.len();
    let mut rvec = matrix_to_rotvec(r);
    let mut tvec = *t;
    let mut best = reprojection_rms(world, image, &rotvec_to_matrix(&rvec), &tvec);
    let mut lambda = 1e-8;
    for _ in 0..30 {
        let rot = rotvec_to_matrix(&rvec);
        let mut jtj = SMatrix::<f64, 6, 6>::zeros();
        let mut jtr = SVector::<f64, 6>::zeros();
        for (w, uv) in world.iter().zip(image.iter()) {
            let c = rot * w + tvec;
            if c.z <= 1e-9 {
                continue;
            }
            let inv_z = 1.0 / c.z;
            let u = c.x * inv_z;
            let v = c.y * inv_z;
            // d(u,v)/dc
            let du_dc = Vector3::new(inv_z, 0.0, -u * inv_z);
            let dv_dc = Vector3::new(0.0, inv_z, -v * inv_z);
            // dc/drvec approx via -[Rw]_x on a left-multiplied increment:
            // c(delta) = exp([delta]_x) R w + t  =>  dc/ddelta = -[Rw + t - t]_x
            let rw = rot * w;
            let skew = Matrix3::new(
                0.0, rw.z, -rw.y, //
                -rw.z, 0.0, rw.x, //
                rw.y, -rw.x, 0.0,
            );
            let mut jrow_u = SVector::<f64, 6>::zeros();
            let mut jrow_v = SVector::<f64, 6>::zeros();
            let ju_rot = du_dc.transpose() * skew;
            let jv_rot = dv_dc.transpose() * skew;
            for k in 0..3 {
                jrow_u[k] = ju_rot[k];
                jrow_v[k] = jv_rot[k];
                jrow_u[k + 3] = du_dc[k];
                jrow_v[k + 3] = dv_dc[k];
            }
            let ru = uv[0] - u;
            let rv = uv[1] - v;
            jtj += jrow_u * jrow_u.transpose() + jrow_v * jrow_v.transpose();
            jtr += jrow_u * ru + jrow_v * rv;
        }
        let _ = n;
        let damped = jtj + SMatrix::<f64, 6, 6>::identity() * lambda;
        let Some(delta) = damped.lu().solve(&jtr) else {
            break;
        };
        let d_rot = Vector3::new(delta[0], delta[1], delta[2]);
        let new_rot = rotvec_to_matrix(&d_rot) * rot;
        let new_rvec = matrix_to_rotvec(&new_rot);
        let new_tvec = tvec + Vector3::new(delta[3], delta[4], delta[5]);
        let err = reprojection_rms(world, image, &rotvec_to_matrix(&new_rvec), &new_tvec);
        if err < best {
            best = err;
            rvec = new_rvec;
            tvec = new_tvec;
            lambda = (lambda * 0.5).max(1e-12);
            if best < 1e-14 {
                break;
            }
        } else {
            lambda *= 10.0;
            if lambda > 1e4 {
                break;
            }
        }
    }
    *r = rotvec_to_matrix(&rvec);
    *t = tvec;
}

/// Solve for the world->camera rotation and translation from 3D points and
/// normalized image observations.
pub fn solve(world_points: &[[f64; 3]], image_points: &[[f64; 2]]) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    assert_eq!(world_points.len(), image_points.len());
    let n = world_points.len();
    if n < 4 {
        return Err(AlignError::DegenerateFiducials {
            reason: format!("need at least 4 correspondences, got {n}"),
        });
    }
    let world: Vec<Vector3<f64>> = world_points
        .iter()
        .map(|p| Vector3::new(p[0], p[1], p[2]))
        .collect();

    let cps = control_points(&world)?;
    let alphas = barycentric(&world, &cps)?;

    // Build M (2n x 12) in normalized coordinates.
    let mut m = DMatrix::<f64>::zeros(2 * n, 12);
    for (i, uv) in image_points.iter().enumerate() {
        for j in 0..4 {
            let a = alphas[i][j];
            m[(2 * i, 3 * j)] = a;
            m[(2 * i, 3 * j + 2)] = -a * uv[0];
            m[(2 * i + 1, 3 * j + 1)] = a;
            m[(2 * i + 1, 3 * j + 2)] = -a * uv[1];
        }
    }
    let mtm = m.transpose() * &m;
    let eig = mtm.symmetric_eigen();
    // Null-space candidates: eigenvectors of the 4 smallest eigenvalues.
    let mut order: Vec<usize> = (0..12).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let mut v = [Vector3::zeros(); 16];
    for k in 0..4 {
        let col = eig.eigenvectors.column(order[k]);
        for j in 0..4 {
            v[k * 4 + j] = Vector3::new(col[3 * j], col[3 * j + 1], col[3 * j + 2]);
        }
    }

    let sys = distance_system(&v, &cps);
    let mut best: Option<(f64, Matrix3<f64>, Vector3<f64>)> = None;
    for case in 0..3 {
        let mut betas = match case {
            0 => betas_case1(&sys),
            1 => betas_case2(&sys),
            _ => betas_case3(&sys),
        };
        refine_betas(&sys, &mut betas);
        let camera_pts = camera_points_from_betas(&v, &betas, &alphas);
        let (r, t) = horn_alignment(&world, &camera_pts);
        let err = reprojection_rms(&world, image_points, &r, &t);
        if err.is_finite() && best.as_ref().map_or(true, |(e, _, _)| err < *e) {
            best = Some((err, r, t));
        }
    }
    let (_, mut r, mut t) = best.ok_or(AlignError::DegenerateFiducials {
        reason: "no valid EPnP solution".into(),
    })?;
    polish_pose(&world, image_points, &mut r, &mut t);
    Ok((r, t))
}
