use super::ClientStack;
use crate::nn::SubModel;
use crate::{Error, Result};

/// Moves every teacher parameter towards the student:
/// `t <- decay * t + (1 - decay) * s`.
///
/// Evaluated as `t + (1 - decay) * (s - t)` so identical models stay
/// bit-identical; `decay == 0` copies the student exactly.
pub fn ema_update(teacher: &mut SubModel, student: &SubModel, decay: f64) -> Result<()> {
    if !(0.0..1.0).contains(&decay) {
        return Err(Error::invalid(format!(
            "EMA decay {decay} must lie in [0, 1)"
        )));
    }
    if !teacher.same_architecture(student) {
        return Err(Error::dim("teacher and student architectures differ"));
    }
    let rate = 1.0 - decay;
    for (t, s) in teacher.layers_mut().iter_mut().zip(student.layers()) {
        for (tv, sv) in t
            .weights
            .data_mut()
            .iter_mut()
            .chain(t.bias.data_mut().iter_mut())
            .zip(s.weights.data().iter().chain(s.bias.data()))
        {
            if decay == 0.0 {
                *tv = *sv;
            } else {
                *tv += rate * (sv - *tv);
            }
        }
    }
    Ok(())
}

/// [`ema_update`] applied to both halves of a client stack.
pub fn ema_update_stack(
    teacher: &mut ClientStack,
    student: &ClientStack,
    decay: f64,
) -> Result<()> {
    ema_update(&mut teacher.body, &student.body, decay)?;
    ema_update(&mut teacher.head, &student.head, decay)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{CutRole, LayerKind};
    use crate::rng_for;

    fn model(seed: u64) -> SubModel {
        SubModel::mlp(
            CutRole::Client,
            &[4, 5, 3],
            LayerKind::DenseLinear,
            &mut rng_for(seed, 0),
        )
        .unwrap()
    }

    fn params(m: &SubModel) -> Vec<f64> {
        m.layers()
            .iter()
            .flat_map(|l| l.weights.data().iter().chain(l.bias.data()).copied())
            .collect()
    }

    #[test]
    fn zero_decay_copies_student() {
        let mut teacher = model(1);
        let student = model(2);
        ema_update(&mut teacher, &student, 0.0).unwrap();
        assert_eq!(teacher, student);
    }

    #[test]
    fn equal_models_are_fixed_points() {
        let mut teacher = model(3);
        let student = teacher.clone();
        ema_update(&mut teacher, &student, 0.9).unwrap();
        assert_eq!(teacher, student);
    }

    #[test]
    fn constant_student_contracts_geometrically() {
        let t0 = model(4);
        let student = model(5);
        let mut teacher = t0.clone();
        let decay: f64 = 0.9;
        for _ in 0..5 {
            ema_update(&mut teacher, &student, decay).unwrap();
        }
        let factor = decay.powi(5);
        for ((t, s), init) in params(&teacher)
            .iter()
            .zip(params(&student))
            .zip(params(&t0))
        {
            let expected = s + (init - s) * factor;
            assert!((t - expected).abs() < 1e-14, "{t} vs {expected}");
        }
    }

    #[test]
    fn rejects_mismatch_and_bad_decay() {
        let mut teacher = model(6);
        let other = SubModel::mlp(
            CutRole::Client,
            &[4, 3],
            LayerKind::DenseLinear,
            &mut rng_for(7, 0),
        )
        .unwrap();
        assert!(matches!(
            ema_update(&mut teacher, &other, 0.5),
            Err(Error::Dimension(_))
        ));
        let student = model(8);
        assert!(ema_update(&mut teacher, &student, 1.0).is_err());
        assert!(ema_update(&mut teacher, &student, -0.1).is_err());
    }
}
