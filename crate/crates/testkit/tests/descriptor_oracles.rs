use pictor::descriptors::{uniform_lut, DescriptorKind, LBP_BINS};
use pictor_testkit::descriptors::uniform_codes;
use pictor_testkit::suites::{descriptor_dims, descriptor_oracle_suite};

#[test]
fn raw_descriptors_match_naive_loops() {
    for case in descriptor_oracle_suite(60, 5) {
        assert!(case.max_abs_error <= 1e-9, "{} differs by {}", case.name, case.max_abs_error);
    }
}

#[test]
fn contract_dimensions() {
    for (kind, want, got) in descriptor_dims(3) {
        assert_eq!(got, want, "{kind}");
        assert_eq!(kind.dim(), want, "{kind}");
    }
    assert_eq!(DescriptorKind::LbpRgb.dim(), 3 * 243);
}

#[test]
fn uniform_census() {
    let uniform = uniform_codes();
    assert_eq!(uniform.len(), 16 * 15 + 2);
    let lut = uniform_lut();
    assert_eq!(lut.len(), 1 << 16);
    for (bin, &code) in uniform.iter().enumerate() {
        assert_eq!(lut[code as usize] as usize, bin);
    }
    let catch_all = lut.iter().filter(|&&b| b as usize == LBP_BINS - 1).count();
    assert_eq!(catch_all, (1 << 16) - uniform.len());
    assert_eq!(LBP_BINS, 243);
}
