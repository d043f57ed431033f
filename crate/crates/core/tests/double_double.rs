mod common;

use common::Dd;

fn close(a: Dd, b: Dd, rel: f64) -> bool {
    let d = a - b;
    (d.hi + d.lo).abs() <= rel * b.hi.abs()
}

#[test]
fn constants_to_32_digits() {
    // e and ln 2 as (hi, lo) pairs of their correctly rounded expansions.
    let e = Dd {
        hi: std::f64::consts::E,
        lo: 1.445_646_891_729_250_2e-16,
    };
    assert!(close(Dd::ONE.exp(), e, 1e-31));
    let ln2 = Dd {
        hi: std::f64::consts::LN_2,
        lo: 2.319_046_813_846_299_6e-17,
    };
    assert!(close(Dd::new(2.0).ln(), ln2, 1e-31));
    let two = Dd::new(2.0);
    let r = two.sqrt();
    assert!(close(r * r, two, 1e-31));
}

#[test]
fn arithmetic_is_exact_beyond_f64() {
    let third = Dd::ONE / Dd::new(3.0);
    assert!(close(third * Dd::new(3.0), Dd::ONE, 1e-31));
    let tiny = Dd::new(1e-20);
    let s = (Dd::ONE + tiny) - Dd::ONE;
    assert!(close(s, tiny, 1e-12), "{s:?}");
    for x in [1e-3, 0.5, 1.0, 7.25, 40.0, -3.5] {
        let v = Dd::new(x);
        assert!(close(v.exp().ln(), v, 1e-30), "{x}");
        assert!(close(Dd::new(v.exp().to_f64()), Dd::new(x.exp()), 1e-15));
    }
}
