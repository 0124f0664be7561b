//! Exact GP regression with the Matérn-3/2 plus linear kernel, kernel
//! fitting by marginal likelihood, and the sparse variational
//! approximation at its closed-form optimum.

use ftdkl::diffmath::Tensor;
use ftdkl::gp::{exact_lml, fit_kernel, optimal_state, svgp_elbo, svgp_predict, ExactGp, KernelParams};

fn main() -> ftdkl::Result<()> {
    let xs: Vec<f64> = (0..30).map(|i| -3.0 + 6.0 * i as f64 / 29.0).collect();
    let y: Vec<f64> = xs.iter().map(|x| (1.3 * x).sin() + 0.2 * x).collect();
    let x = Tensor::column(xs);

    let mut params = KernelParams::new(1.0, 1.0, Some(0.1), 0.05)?;
    println!("initial log marginal likelihood {:.3}", exact_lml(&x, &y, &params)?);
    let lml = fit_kernel(&x, &y, &mut params, 200, 0.05)?;
    println!(
        "fitted: lengthscale {:.3}, matern variance {:.3}, linear variance {:.3}, noise {:.2e}, lml {lml:.3}",
        params.lengthscale(),
        params.matern_variance(),
        params.linear_variance(),
        params.noise()
    );

    let query = Tensor::column(vec![-2.0, 0.25, 2.9, 4.5]);
    let gp = ExactGp::new(x.clone(), &y, params.clone())?;
    let exact = gp.predict(&query);

    // Ten inducing points spread over the data.
    let z = Tensor::column((0..10).map(|i| -3.0 + 6.0 * i as f64 / 9.0).collect());
    let state = optimal_state(&x, &y, z, &params)?;
    let sparse = svgp_predict(&query, &state, &params)?;
    println!("ELBO with 10 inducing points {:.3}", svgp_elbo(&x, &y, &state, &params, y.len())?);
    for (i, (e, s)) in exact.iter().zip(&sparse).enumerate() {
        println!(
            "x = {:>5.2}: exact {:>7.3} ± {:.3}   sparse {:>7.3} ± {:.3}",
            query.get(i, 0),
            e.mean,
            e.std,
            s.mean,
            s.std
        );
    }
    Ok(())
}
