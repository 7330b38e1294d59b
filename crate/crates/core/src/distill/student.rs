use super::DistillError;
use crate::nets::{Cond, EmaShadow, EpsNet, GradTargets, Head};
use crate::tensor::{Graph, Tensor};

/// Smallest `alpha_T` accepted for the re-parameterized student.
pub const MIN_ALPHA_T: f64 = 1e-6;

/// One-step generator `f(z, y)` built on an eps-network evaluated at `t = T`.
///
/// Re-parameterized: `f(z, y) = (z - sigma_T eps(z, T, y)) / alpha_T`.
/// Otherwise the raw `eps(z, T, y)` is the sample.
#[derive(Debug, Clone)]
pub struct Student {
    net: EpsNet,
    ema: EmaShadow,
    parameterize: bool,
}

impl Student {
    /// Copies the teacher's weights into the student.
    pub fn from_teacher(teacher: &EpsNet, ema_decay: f64, parameterize: bool) -> Result<Self, DistillError> {
        let ema = EmaShadow::new(ema_decay, teacher.params())?;
        Self::from_parts(teacher.clone(), ema, parameterize)
    }

    pub fn from_parts(net: EpsNet, ema: EmaShadow, parameterize: bool) -> Result<Self, DistillError> {
        if !ema.shadow().same_structure(net.params()) {
            return Err(DistillError::Config("EMA shadow does not match the student network".into()));
        }
        let st = Self { net, ema, parameterize };
        st.head()?;
        Ok(st)
    }

    pub fn net(&self) -> &EpsNet {
        &self.net
    }

    pub(crate) fn net_mut(&mut self) -> &mut EpsNet {
        &mut self.net
    }

    pub fn ema(&self) -> &EmaShadow {
        &self.ema
    }

    pub(crate) fn ema_mut(&mut self) -> &mut EmaShadow {
        &mut self.ema
    }

    pub fn parameterized(&self) -> bool {
        self.parameterize
    }

    fn head(&self) -> Result<Head, DistillError> {
        if !self.parameterize {
            return Ok(Head::Eps);
        }
        let sched = self.net.schedule();
        let t = sched.max_t();
        let alpha = sched.alpha(t);
        if alpha < MIN_ALPHA_T {
            return Err(DistillError::Config(format!(
                "alpha_T = {alpha:e} is below {MIN_ALPHA_T:e}; cannot re-parameterize the student"
            )));
        }
        Ok(Head::Reparam {
            alpha,
            sigma: sched.sigma(t),
        })
    }

    /// `eps(z, T, y)` from the raw student weights.
    pub fn eps_at_t_max(&self, z: &Tensor, y: &[Cond]) -> Result<Tensor, DistillError> {
        let t = self.net.schedule().max_t();
        Ok(self.net.eps_forward(z, &vec![t; z.rows()], y)?)
    }

    /// One-step samples from the raw student weights.
    pub fn forward(&self, z: &Tensor, y: &[Cond]) -> Result<Tensor, DistillError> {
        Ok(self.run(&self.net, z, y, GradTargets::default())?.1)
    }

    /// One-step samples from the EMA weights.
    pub fn forward_ema(&self, z: &Tensor, y: &[Cond]) -> Result<Tensor, DistillError> {
        Ok(self.run(&self.ema_net()?, z, y, GradTargets::default())?.1)
    }

    pub fn generate(&self, z: &Tensor, y: &[Cond], use_ema: bool) -> Result<Tensor, DistillError> {
        if use_ema {
            self.forward_ema(z, y)
        } else {
            self.forward(z, y)
        }
    }

    /// The student network carrying the EMA weights.
    pub fn ema_net(&self) -> Result<EpsNet, DistillError> {
        Ok(EpsNet::from_parts(
            self.net.config().clone(),
            self.net.schedule().clone(),
            self.ema.shadow().clone(),
            self.net.prior().cloned(),
        )?)
    }

    /// Forward pass keeping the graph, with gradients on the student weights.
    pub(crate) fn forward_graph(&self, z: &Tensor, y: &[Cond]) -> Result<(Graph, Tensor), DistillError> {
        let grads = GradTargets {
            base: true,
            ..Default::default()
        };
        self.run(&self.net, z, y, grads)
    }

    fn run(&self, net: &EpsNet, z: &Tensor, y: &[Cond], grads: GradTargets) -> Result<(Graph, Tensor), DistillError> {
        let t = net.schedule().max_t();
        Ok(net.run(z, &vec![t; z.rows()], y, None, grads, self.head()?)?)
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::nets::{Init, NetConfig};
    use crate::rng::RngStream;
    use crate::schedule::{make_vp_schedule, ScheduleKind};

    fn net(init: Init) -> EpsNet {
        let sched = Arc::new(make_vp_schedule(1000, 1e-4, 0.02, ScheduleKind::VpLinear).unwrap());
        EpsNet::new(NetConfig::default(), sched, init, &mut RngStream::new(1, "student")).unwrap()
    }

    #[test]
    fn zero_eps_gives_scaled_noise() {
        let st = Student::from_teacher(&net(Init::ZeroHead), 0.999, true).unwrap();
        let z = RngStream::new(2, "z").normal_tensor(&[4, 2]);
        let a = st.net().schedule().alpha(1000);
        let out = st.forward(&z, &[Cond::Class(0); 4]).unwrap();
        for (o, zv) in out.data().iter().zip(z.data()) {
            assert!((o - zv / a).abs() < 1e-12 * (zv / a).abs().max(1.0));
        }
    }

    #[test]
    fn reparameterization_identity() {
        let st = Student::from_teacher(&net(Init::Standard), 0.999, true).unwrap();
        let sched = st.net().schedule().clone();
        let (a, s) = (sched.alpha(1000), sched.sigma(1000));
        let mut rng = RngStream::new(3, "z");
        let z = rng.normal_tensor(&[100, 2]);
        let y: Vec<Cond> = (0..100).map(|i| Cond::Class(i % 3)).collect();
        let f = st.forward(&z, &y).unwrap();
        let e = st.eps_at_t_max(&z, &y).unwrap();
        for i in 0..100 {
            for d in 0..2 {
                let back = a * f.row(i)[d] + s * e.row(i)[d];
                assert!((back - z.row(i)[d]).abs() < 1e-12, "{back} vs {}", z.row(i)[d]);
            }
        }
    }

    #[test]
    fn raw_arm_returns_eps() {
        let st = Student::from_teacher(&net(Init::Standard), 0.999, false).unwrap();
        let z = RngStream::new(4, "z").normal_tensor(&[3, 2]);
        let y = [Cond::Class(1); 3];
        assert_eq!(st.forward(&z, &y).unwrap(), st.eps_at_t_max(&z, &y).unwrap());
    }

    #[test]
    fn vanishing_alpha_is_rejected() {
        let sched = Arc::new(make_vp_schedule(1000, 0.5, 0.9, ScheduleKind::VpLinear).unwrap());
        let n = EpsNet::new(NetConfig::default(), sched, Init::Standard, &mut RngStream::new(5, "n")).unwrap();
        assert!(matches!(Student::from_teacher(&n, 0.9, true), Err(DistillError::Config(_))));
        assert!(Student::from_teacher(&n, 0.9, false).is_ok());
    }
}
