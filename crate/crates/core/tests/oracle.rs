use std::f64::consts::PI;

use eigenpinn::oracle::{ball_spectrum, bessel_zero, fd_spectrum, rectangle_spectrum};
use eigenpinn::{Domain, Potential};

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn fd_unit_square_matches_closed_form() {
    let exact = rectangle_spectrum(&[1.0, 1.0], 4).unwrap();
    let fd128 = fd_spectrum(&Domain::unit_square(), &Potential::Zero, 128, 4).unwrap();
    let fd64 = fd_spectrum(&Domain::unit_square(), &Potential::Zero, 64, 4).unwrap();
    assert_eq!(fd128.eigenvalues.len(), 4);
    for k in 0..4 {
        let (e128, e64) = (
            rel(fd128.eigenvalues[k], exact[k]),
            rel(fd64.eigenvalues[k], exact[k]),
        );
        assert!(e128 < 5e-3, "mode {k}: {e128}");
        assert!(e128 < e64, "mode {k}: no refinement gain");
        // Second order: halving h cuts the error by about four.
        assert!(
            e64 / e128 > 3.0 && e64 / e128 < 5.0,
            "mode {k}: ratio {}",
            e64 / e128
        );
    }
}

#[test]
fn fd_unit_disk_first_eigenvalue() {
    let fd = fd_spectrum(&Domain::unit_disk(), &Potential::Zero, 128, 1).unwrap();
    assert!(
        rel(fd.eigenvalues[0], 5.7832) < 1e-2,
        "{}",
        fd.eigenvalues[0]
    );
    let j = bessel_zero(0.0, 1).unwrap();
    assert!(rel(fd.eigenvalues[0], j * j) < 1e-3);
}

#[test]
fn fd_right_triangle_first_eigenvalue() {
    let tri = Domain::Triangle {
        vertices: [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]],
    };
    let fd = fd_spectrum(&tri, &Potential::Zero, 128, 1).unwrap();
    // Antisymmetric modes of the unit square: π²(1 + 4).
    assert!(
        rel(fd.eigenvalues[0], 5.0 * PI * PI) < 1e-2,
        "{}",
        fd.eigenvalues[0]
    );
}

#[test]
fn fd_harmonic_potential_raises_spectrum() {
    let free = fd_spectrum(&Domain::unit_disk(), &Potential::Zero, 64, 3).unwrap();
    let trap = fd_spectrum(
        &Domain::unit_disk(),
        &Potential::Harmonic { omega: 1.0 },
        64,
        3,
    )
    .unwrap();
    for (f, t) in free.eigenvalues.iter().zip(&trap.eigenvalues) {
        // 0 ≤ V ≤ 1/2 on the unit disk.
        assert!(t > f && *t < f + 0.5 + 1e-9, "{f} {t}");
    }
}

#[test]
fn ball_spectrum_matches_known_lists() {
    let disk = ball_spectrum(2, 1.0, 4).unwrap();
    for (got, want) in disk
        .eigenvalues
        .iter()
        .zip([5.7832, 14.6819, 26.3743, 30.4713])
    {
        assert!((got - want).abs() < 2e-3);
    }
    let half = ball_spectrum(2, 0.5, 1).unwrap();
    assert!((half.eigenvalues[0] - 4.0 * disk.eigenvalues[0]).abs() < 1e-9);
    let b3 = ball_spectrum(3, 1.0, 3).unwrap();
    assert!((b3.eigenvalues[0] - PI * PI).abs() < 1e-9);
    assert!(b3.eigenvalues.windows(2).all(|w| w[0] < w[1]));
    assert!(ball_spectrum(1, 1.0, 1).is_err());
}
