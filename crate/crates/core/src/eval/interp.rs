use super::EvalError;
use crate::distill::Student;
use crate::nets::Cond;
use crate::tensor::Tensor;

/// Angles within this distance of pi are treated as antipodal.
const ANTIPODAL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub enum InterpSpec {
    /// Linear path between two class embeddings with the noise held fixed.
    LerpCond { from: usize, to: usize, z: Vec<f64>, steps: usize },
    /// Spherical path between two noise vectors with the condition held fixed.
    SlerpNoise { y: Cond, z0: Vec<f64>, z1: Vec<f64>, steps: usize },
}

/// Spherical interpolation; falls back to linear for nearly parallel inputs.
pub fn slerp(a: &[f64], b: &[f64], t: f64) -> Result<Vec<f64>, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Input("slerp endpoints differ in length".into()));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(EvalError::Input("slerp endpoint has zero norm".into()));
    }
    let cos = (a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)).clamp(-1.0, 1.0);
    let omega = cos.acos();
    if std::f64::consts::PI - omega < ANTIPODAL_TOL {
        return Err(EvalError::Input("slerp endpoints are antipodal; the path is undefined".into()));
    }
    if omega < 1e-12 {
        return Ok(a.iter().zip(b).map(|(x, y)| (1.0 - t) * x + t * y).collect());
    }
    let (wa, wb) = (((1.0 - t) * omega).sin() / omega.sin(), (t * omega).sin() / omega.sin());
    Ok(a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect())
}

/// `steps` student samples along the path, endpoints included.
pub fn interpolate_sample(student: &Student, spec: &InterpSpec, use_ema: bool) -> Result<Tensor, EvalError> {
    let frac = |i: usize, steps: usize| i as f64 / (steps - 1) as f64;
    let (z, y) = match spec {
        InterpSpec::LerpCond { from, to, z, steps } => {
            check_steps(*steps)?;
            let rows = vec![z.clone(); *steps];
            let ys = (0..*steps)
                .map(|i| match i {
                    0 => Cond::Class(*from),
                    i if i + 1 == *steps => Cond::Class(*to),
                    i => Cond::Lerp {
                        from: *from,
                        to: *to,
                        t: frac(i, *steps),
                    },
                })
                .collect::<Vec<_>>();
            (rows, ys)
        }
        InterpSpec::SlerpNoise { y, z0, z1, steps } => {
            check_steps(*steps)?;
            let rows = (0..*steps)
                .map(|i| match i {
                    0 => Ok(z0.clone()),
                    i if i + 1 == *steps => Ok(z1.clone()),
                    i => slerp(z0, z1, frac(i, *steps)),
                })
                .collect::<Result<Vec<_>, _>>()?;
            // Reject antipodal endpoints even when no interior point exists.
            slerp(z0, z1, 0.5)?;
            (rows, vec![*y; *steps])
        }
    };
    if z[0].len() != student.net().data_dim() {
        return Err(EvalError::Input("noise dimension does not match the student".into()));
    }
    Ok(student.generate(&Tensor::from_rows(&z), &y, use_ema)?)
}

fn check_steps(steps: usize) -> Result<(), EvalError> {
    if steps < 2 {
        return Err(EvalError::Input(format!("need at least 2 steps, got {steps}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::nets::{EpsNet, Init, NetConfig};
    use crate::rng::RngStream;
    use crate::schedule::{make_vp_schedule, ScheduleKind};

    fn student() -> Student {
        let sched = Arc::new(make_vp_schedule(1000, 8.5e-4, 0.012, ScheduleKind::VpLinear).unwrap());
        let net = EpsNet::new(NetConfig::default(), sched, Init::Standard, &mut RngStream::new(1, "i")).unwrap();
        Student::from_teacher(&net, 0.999, true).unwrap()
    }

    #[test]
    fn two_steps_are_the_endpoints() {
        let st = student();
        let (z0, z1) = (vec![0.3, -1.0], vec![1.2, 0.4]);
        let out = interpolate_sample(
            &st,
            &InterpSpec::SlerpNoise { y: Cond::Class(1), z0: z0.clone(), z1: z1.clone(), steps: 2 },
            false,
        )
        .unwrap();
        let want = st.forward(&Tensor::from_rows(&[z0, z1]), &[Cond::Class(1); 2]).unwrap();
        assert_eq!(out, want);
    }

    #[test]
    fn slerp_keeps_unit_norm() {
        let a = [1.0, 0.0, 0.0];
        let b = [0.0, 0.6, 0.8];
        for i in 0..=10 {
            let p = slerp(&a, &b, i as f64 / 10.0).unwrap();
            let n = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert!(slerp(&a, &[-1.0, 0.0, 0.0], 0.5).is_err());
    }

    #[test]
    fn lerp_midpoint_is_the_mean_embedding() {
        let st = student();
        let z = vec![0.5, 0.25];
        let out = interpolate_sample(&st, &InterpSpec::LerpCond { from: 0, to: 2, z: z.clone(), steps: 3 }, false).unwrap();
        let mut params = st.net().params().clone();
        let table = params.get_mut("cond_embed").unwrap();
        let mean: Vec<f64> = table.row(0).iter().zip(table.row(2)).map(|(a, b)| 0.5 * a + 0.5 * b).collect();
        table.row_mut(0).copy_from_slice(&mean);
        let net = EpsNet::from_parts(st.net().config().clone(), st.net().schedule().clone(), params, None).unwrap();
        let moved = Student::from_teacher(&net, 0.999, true).unwrap();
        let want = moved.forward(&Tensor::from_rows(&[z]), &[Cond::Class(0)]).unwrap();
        for (a, b) in out.row(1).iter().zip(want.row(0)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
