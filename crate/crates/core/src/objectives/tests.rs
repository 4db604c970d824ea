use super::*;
use crate::errormodel::{ErrorModel, ErrorModelKind};
use crate::flows::{ConditionalFlow, FlowArch};
use crate::networks::{Discriminator, Objective};
use crate::numcore::{gaussian_logpdf, grad_check, Matrix, RngState, Tape, LN_2PI};

fn small_flow(event: usize, ctx: usize, seed: u64, jitter: f64) -> ConditionalFlow {
    let arch = FlowArch {
        hidden: 8,
        bins: 4,
        layers: 2,
        ..FlowArch::new(event, ctx)
    };
    let mut rng = RngState::new(seed);
    let f = ConditionalFlow::new(arch.clone(), &mut rng).unwrap();
    let p = f.params().iter().map(|v| v + jitter * rng.normal()).collect();
    ConditionalFlow::from_params(arch, p).unwrap()
}

fn small_error(kind: ErrorModelKind, seed: u64) -> ErrorModel {
    let mut rng = RngState::new(seed);
    let mut e = ErrorModel::new(kind, 2, 2, &mut rng);
    if let crate::errormodel::ErrorArch::DiagNetPlusGlobal(_) = e.arch() {
        let arch = crate::errormodel::ErrorArch::DiagNetPlusGlobal(crate::networks::ErrorNet {
            hidden: 4,
            ..crate::networks::ErrorNet::new(2, 2)
        });
        e = ErrorModel::from_params(arch.clone(), arch.init(&mut rng)).unwrap();
    }
    let p = e.params().iter().map(|v| v + 0.3 * rng.normal()).collect();
    e.set_params(p);
    e
}

#[test]
fn identity_posterior_loss_is_gaussian_entropy() {
    let flow = ConditionalFlow::new(FlowArch::new(2, 3), &mut RngState::new(0)).unwrap();
    let mut rng = RngState::new(1);
    let n = 20_000;
    let theta = rng.normal_matrix(n, 2);
    let z = rng.normal_matrix(n, 3);
    let l = npe_loss(&flow, &theta, &z).unwrap();
    let want = LN_2PI + 1.0;
    assert!((l - want).abs() < 0.05, "{l} vs {want}");
}

#[test]
fn duplicated_batch_gives_same_loss() {
    let flow = small_flow(2, 1, 3, 0.1);
    let mut rng = RngState::new(2);
    let theta = rng.normal_matrix(10, 2);
    let z = rng.normal_matrix(10, 1);
    let a = npe_loss(&flow, &theta, &z).unwrap();
    let b = npe_loss(&flow, &theta.vstack(&theta), &z.vstack(&z)).unwrap();
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn robust_loss_gradient_matches_differences() {
    let post = small_flow(2, 2, 4, 0.1);
    let lik = small_flow(2, 2, 5, 0.1);
    for kind in [ErrorModelKind::DiagNetPlusGlobal, ErrorModelKind::GlobalCholesky] {
        let err = small_error(kind, 6);
        let obj = RvnpObjective {
            posterior: post.arch().clone(),
            error: err.arch().clone(),
            likelihood: &lik,
            z_obs: Matrix::from_rows(&[vec![0.3, -0.2], vec![1.0, 0.5]]),
            space: ParamSpace::Direct {
            prior: Prior::standard_normal(2),
        },
            cfg: RvnpLossConfig {
                k: 3,
                m: 2,
                log_prior_xi: None,
            },
        };
        let mut point = post.params().to_vec();
        point.extend_from_slice(err.params());
        let e = grad_check(
            |t, p| {
                let post_b = obj.posterior.bind_from(t, p, 0);
                let l = rvnp_loss_on_tape(
                    t,
                    &post_b,
                    obj.likelihood,
                    &obj.error,
                    p,
                    obj.posterior.num_params(),
                    t.constant(obj.z_obs.clone()),
                    &obj.space,
                    &obj.cfg,
                    &mut RngState::new(11),
                )?;
                Ok(t.sum(l))
            },
            &point,
        )
        .unwrap();
        assert!(e < 1e-3, "{kind:?}: {e}");
    }
}

#[test]
fn single_sample_bound_is_the_elbo() {
    let post = small_flow(2, 2, 7, 0.1);
    let lik = small_flow(2, 2, 8, 0.1);
    let err = small_error(ErrorModelKind::DiagNetPlusGlobal, 9);
    let prior = Prior::uniform(vec![-4.0, -4.0], vec![4.0, 4.0]).unwrap();
    let z = Matrix::from_rows(&[vec![0.1, 0.4], vec![-0.7, 0.2], vec![1.2, -1.0]]);
    let cfg = RvnpLossConfig {
        k: 1,
        m: 1,
        log_prior_xi: None,
    };
    let got = rvnp_loss(&post, &lik, &err, &z, &ParamSpace::Direct { prior: prior.clone() }, &cfg, &mut RngState::new(3)).unwrap();

    // the same draws, scored with the plain (tape-free) routines
    let mut rng = RngState::new(3);
    let u = rng.normal_matrix(3, 2);
    let noise = rng.normal_matrix(3, 2);
    let (theta, log_q) = post.sample_with_noise(&u, &z).unwrap();
    let (x, _) = lik.forward(&noise, &theta).unwrap();
    let mut total = 0.0;
    for i in 0..3 {
        let cov = err.error_cov(theta.row(i)).unwrap();
        let ll = gaussian_logpdf(z.row(i), x.row(i), &cov).unwrap();
        total -= ll + prior.log_prob(theta.row(i)) - log_q[i];
    }
    let want = total / 3.0;
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
}

#[test]
fn samples_outside_support_are_excluded_or_reported() {
    let post = ConditionalFlow::new(FlowArch::new(1, 1), &mut RngState::new(0)).unwrap();
    let lik = ConditionalFlow::new(FlowArch::new(1, 1), &mut RngState::new(1)).unwrap();
    let err = ErrorModel::new(ErrorModelKind::GlobalCholesky, 1, 1, &mut RngState::new(2));
    let z = Matrix::from_rows(&[vec![0.0]]);
    // a support far from the (standard normal) proposal: every weight is -inf
    let prior = Prior::uniform(vec![50.0], vec![51.0]).unwrap();
    let cfg = RvnpLossConfig {
        k: 4,
        m: 2,
        log_prior_xi: None,
    };
    match rvnp_loss(&post, &lik, &err, &z, &ParamSpace::Direct { prior: prior.clone() }, &cfg, &mut RngState::new(0)) {
        Err(crate::Error::DegenerateWeights { index }) => assert_eq!(index, 0),
        other => panic!("unexpected {other:?}"),
    }
    // half-line support: finite loss, some weights dropped
    let prior = Prior::uniform(vec![0.0], vec![10.0]).unwrap();
    let cfg = RvnpLossConfig { k: 30, ..cfg };
    assert!(rvnp_loss(&post, &lik, &err, &z, &ParamSpace::Direct { prior: prior.clone() }, &cfg, &mut RngState::new(0))
        .unwrap()
        .is_finite());
}

#[test]
fn likelihood_receives_no_gradient() {
    let post = small_flow(2, 2, 4, 0.1);
    let lik = small_flow(2, 2, 5, 0.1);
    let before = lik.params().to_vec();
    let err = small_error(ErrorModelKind::GlobalCholesky, 6);
    let obj = RvnpObjective {
        posterior: post.arch().clone(),
        error: err.arch().clone(),
        likelihood: &lik,
        z_obs: Matrix::from_rows(&[vec![0.3, -0.2], vec![1.0, 0.5]]),
        space: ParamSpace::Direct {
            prior: Prior::standard_normal(2),
        },
        cfg: RvnpLossConfig::default(),
    };
    let mut p = post.params().to_vec();
    p.extend_from_slice(err.params());
    let (_, g) = obj.chunk(&p, &[0, 1], &mut RngState::new(0), true).unwrap();
    assert_eq!(g.unwrap().len(), p.len());
    assert_eq!(lik.params(), &before[..]);
}

#[test]
fn constant_critic_gives_two_ln_two() {
    let critic = Discriminator::new(2, 1);
    let zero = vec![0.0; critic.num_params()];
    let t = Tape::new();
    let d = critic.mlp().bind(&t, &zero, false);
    let mut rng = RngState::new(0);
    let z = t.constant(rng.normal_matrix(16, 2));
    let theta = rng.normal_matrix(16, 1);
    let l = infomax_on_tape(&t, z, &theta, &d, 4, &mut rng).unwrap();
    assert!((t.scalar(l) - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
    let one = Matrix::zeros(1, 1);
    let z1 = t.constant(Matrix::zeros(1, 2));
    assert!(infomax_on_tape(&t, z1, &one, &d, 4, &mut rng).is_err());
}

#[test]
fn floor_only_tuning_matches_npe() {
    let flow = small_flow(2, 2, 12, 0.1);
    let mut rng = RngState::new(4);
    let theta = rng.normal_matrix(200, 2);
    let z = rng.normal_matrix(200, 2);
    let arch = crate::errormodel::ErrorArch::new(ErrorModelKind::GlobalCholesky, 2, 2);
    let floor_only = ErrorModel::from_params(arch, vec![-50.0, -50.0, 0.0]).unwrap();
    let a = npe_loss(&flow, &theta, &z).unwrap();
    let b = tuning_loss(&flow, &theta, &z, &floor_only, &mut rng).unwrap();
    assert!((a - b).abs() < 0.01);
    let c = tuning_loss(&flow, &theta, &z, &floor_only, &mut RngState::new(9)).unwrap();
    let d = tuning_loss(&flow, &theta, &z, &floor_only, &mut RngState::new(9)).unwrap();
    assert_eq!(c, d);
}

#[test]
fn spike_slab_hits_about_half() {
    let x = Matrix::zeros(100, 40);
    let c = Corruption::SpikeSlab { prob: 0.5, scale: 0.25 };
    let y = c.apply(&x, &x, &mut RngState::new(0)).unwrap();
    let changed = y.as_slice().iter().filter(|v| **v != 0.0).count() as f64 / 4000.0;
    assert!((changed - 0.5).abs() < 0.04, "{changed}");
    let none = Corruption::SpikeSlab { prob: 0.0, scale: 0.25 };
    assert_eq!(none.apply(&x, &x, &mut RngState::new(0)).unwrap(), x);
}
