//! The two row proximal operators on paper-sized inputs, step by step.
//!
//! The row-max prox redistributes a fixed budget across the largest
//! magnitudes so they flatten to a common level; the row-norm prox shrinks
//! the whole row radially. Both write exact zeros once the step size
//! covers the row, which is what lets training delete units.

use autosize::{l1_ball_project, l21_prox_row, linf_prox_row, linf_prox_row_serial, ProxStepSize};

fn show(name: &str, v: &[f64]) {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:5.2}")).collect();
    println!("{name:24} [{}]", parts.join(", "));
}

fn main() -> autosize::Result<()> {
    let v = [3.5, 2.5, 1.0];
    let step = ProxStepSize::new(2.0)?;
    show("input", &v);

    // the prox of the row-max norm removes `step` of mass from the top
    // magnitudes: 3.5 and 2.5 meet at 2.0, the rest is untouched
    let prox = linf_prox_row(&v, step)?;
    show("row-max prox, step 2", &prox);
    assert_eq!(prox, vec![2.0, 2.0, 1.0]);

    // equivalently, the removed mass is the projection of the row onto
    // the l1 ball of radius `step`; prox plus projection restores the row
    let cuts = l1_ball_project(&v, 2.0)?;
    show("l1-ball projection", &cuts);
    assert_eq!(cuts, vec![1.5, 0.5, 0.0]);
    for ((p, c), original) in prox.iter().zip(&cuts).zip(&v) {
        assert_eq!(p + c, *original);
    }

    // the serial clip-level route agrees with the scan-based route
    let serial = linf_prox_row_serial(&v, step)?;
    show("serial route", &serial);
    let worst = prox
        .iter()
        .zip(&serial)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    println!("{:24} {:.2e}", "route disagreement", worst);
    assert!(worst <= 1e-6);

    // signs survive; only magnitudes are cut
    let signed = linf_prox_row(&[-1.0, 3.0], ProxStepSize::new(1.0)?)?;
    show("signed input (-1, 3)", &signed);
    assert_eq!(signed, vec![-1.0, 2.0]);

    // the row-norm prox shrinks radially: a (3, 4) row of norm 5 keeps
    // its direction and loses `step` of length
    let radial = l21_prox_row(&[3.0, 4.0], ProxStepSize::new(2.5)?)?;
    show("row-norm prox (3, 4)", &radial);
    assert_eq!(radial, vec![1.5, 2.0]);

    // a step at least the row norm kills the row exactly
    let dead = l21_prox_row(&[3.0, 4.0], ProxStepSize::new(5.0)?)?;
    show("row-norm prox, step 5", &dead);
    assert!(dead.iter().all(|&x| x == 0.0));

    println!("all worked values match");
    Ok(())
}
