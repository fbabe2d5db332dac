mod common;

use common::random_tensor;
use proptest::prelude::*;
use rankfit_core::archive::*;
use rankfit_core::decomposition::{init, DecompKind, KernelFactors};
use rankfit_core::{ConvKernel, DenseTensor};

fn f32_exact(t: DenseTensor) -> DenseTensor {
    let data = t.data().iter().map(|&v| v as f32 as f64).collect();
    DenseTensor::new(t.dims().to_vec(), data).unwrap()
}

fn le_u64(b: &[u8]) -> u64 {
    u64::from_le_bytes(b.try_into().unwrap())
}

#[test]
fn empty_archive_layout() {
    let bytes = write_archive(&[]).unwrap();
    assert_eq!(&bytes[..4], b"OTAR");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let hlen = le_u64(&bytes[8..16]) as usize;
    assert_eq!(std::str::from_utf8(&bytes[16..16 + hlen]).unwrap().trim(), "[]");
    assert_eq!(bytes.len(), 16 + hlen);
    assert!(read_archive(&bytes).unwrap().is_empty());
}

#[test]
fn small_matrix_payload_is_little_endian_row_major() {
    let t = DenseTensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let bytes = write_archive(&[("m".into(), t.clone())]).unwrap();
    let hlen = le_u64(&bytes[8..16]) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
    assert_eq!(header, serde_json::json!([{"name": "m", "dtype": "f32", "shape": [2, 2], "offset": 0, "nbytes": 16}]));
    let expected: Vec<u8> = [1.0f32, 2.0, 3.0, 4.0].iter().flat_map(|v| v.to_le_bytes()).collect();
    assert_eq!((16 + hlen) % 8, 0);
    assert_eq!(&bytes[16 + hlen..], &expected[..]);
    assert_eq!(read_archive(&bytes).unwrap(), vec![("m".to_string(), t)]);
}

fn fifty_tensors() -> Vec<(String, DenseTensor)> {
    (0..50u64)
        .map(|i| {
            let dims: Vec<usize> = (0..1 + i as usize % 4).map(|d| 1 + (i as usize * 7 + d * 3) % 5).collect();
            (format!("t{i}"), f32_exact(random_tensor(dims, i).scale(10f64.powi(i as i32 % 7 - 3))))
        })
        .collect()
}

#[test]
fn fifty_random_tensors_roundtrip_bit_exactly() {
    let tensors = fifty_tensors();
    let back = read_archive(&write_archive(&tensors).unwrap()).unwrap();
    assert_eq!(back.len(), 50);
    for ((na, a), (nb, b)) in tensors.iter().zip(&back) {
        assert_eq!(na, nb);
        assert_eq!(a.dims(), b.dims());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()), "{na}");
    }
}

#[test]
fn entries_are_eight_byte_aligned() {
    let archive = Archive::from_tensors(fifty_tensors()).unwrap();
    assert!(archive.entries().iter().all(|e| e.offset % 8 == 0));
}

#[test]
fn malformed_streams_have_distinct_errors() {
    let good = write_archive(&[("a".into(), DenseTensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap())]).unwrap();

    let mut bad_magic = good.clone();
    bad_magic[..4].copy_from_slice(b"XXXX");
    assert!(matches!(read_archive(&bad_magic), Err(ArchiveError::BadMagic(_))));
    assert!(matches!(read_archive(b"OT"), Err(ArchiveError::BadMagic(_))));

    let mut version = good.clone();
    version[4..8].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(read_archive(&version), Err(ArchiveError::UnsupportedVersion(2))));

    let hlen = le_u64(&good[8..16]) as usize;
    let truncated = &good[..16 + hlen + 8];
    assert!(matches!(read_archive(truncated), Err(ArchiveError::TruncatedPayload { .. })));
    assert!(matches!(read_archive(&good[..20]), Err(ArchiveError::TruncatedHeader { .. })));
    assert!(matches!(read_archive(&good[..10]), Err(ArchiveError::TruncatedHeader { .. })));

    let mut garbage = good.clone();
    garbage[16] = b'{';
    assert!(matches!(read_archive(&garbage), Err(ArchiveError::MalformedHeader(_))));

    let with_header = |h: &str| {
        let mut b = b"OTAR".to_vec();
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&(h.len() as u64).to_le_bytes());
        b.extend_from_slice(h.as_bytes());
        b.extend_from_slice(&[0u8; 32]);
        b
    };
    let wrong_size = with_header(r#"[{"name":"a","dtype":"f32","shape":[2],"offset":0,"nbytes":12}]"#);
    assert!(matches!(read_archive(&wrong_size), Err(ArchiveError::MalformedHeader(_))));
    let dtype = with_header(r#"[{"name":"a","dtype":"f64","shape":[2],"offset":0,"nbytes":8}]"#);
    assert!(matches!(read_archive(&dtype), Err(ArchiveError::MalformedHeader(_))));
    let overlap = with_header(
        r#"[{"name":"a","dtype":"f32","shape":[2],"offset":0,"nbytes":8},{"name":"b","dtype":"f32","shape":[2],"offset":4,"nbytes":8}]"#,
    );
    assert!(matches!(read_archive(&overlap), Err(ArchiveError::MalformedHeader(_))));
    let dup = with_header(
        r#"[{"name":"a","dtype":"f32","shape":[1],"offset":0,"nbytes":4},{"name":"a","dtype":"f32","shape":[1],"offset":8,"nbytes":4}]"#,
    );
    assert!(matches!(read_archive(&dup), Err(ArchiveError::DuplicateName(_))));
    let nan = {
        let mut b = with_header(r#"[{"name":"a","dtype":"f32","shape":[1],"offset":0,"nbytes":4}]"#);
        let at = b.len() - 32;
        b[at..at + 4].copy_from_slice(&f32::NAN.to_le_bytes());
        b
    };
    assert!(matches!(read_archive(&nan), Err(ArchiveError::NonFinite(_))));
}

#[test]
fn writer_rejects_duplicates_and_f32_overflow() {
    let t = DenseTensor::new(vec![1], vec![1.0]).unwrap();
    assert!(matches!(write_archive(&[("x".into(), t.clone()), ("x".into(), t)]), Err(ArchiveError::DuplicateName(_))));
    let big = DenseTensor::new(vec![1], vec![1e300]).unwrap();
    assert!(matches!(write_archive(&[("b".into(), big)]), Err(ArchiveError::NonFinite(_))));
}

#[test]
fn concatenated_entry_lists_form_a_valid_archive() {
    let a = write_archive(&fifty_tensors()[..7]).unwrap();
    let b = write_archive(&fifty_tensors()[7..12]).unwrap();
    let split = |bytes: &[u8]| {
        let hlen = le_u64(&bytes[8..16]) as usize;
        let header: Vec<serde_json::Value> = serde_json::from_slice(&bytes[16..16 + hlen]).unwrap();
        (header, bytes[16 + hlen..].to_vec())
    };
    let (mut ha, pa) = split(&a);
    let (hb, pb) = split(&b);
    let shift = pa.len() as u64;
    for mut e in hb {
        let off = e["offset"].as_u64().unwrap();
        e["offset"] = (off + shift).into();
        ha.push(e);
    }
    let header = serde_json::to_vec(&ha).unwrap();
    let mut joined = b"OTAR".to_vec();
    joined.extend_from_slice(&1u32.to_le_bytes());
    joined.extend_from_slice(&(header.len() as u64).to_le_bytes());
    joined.extend_from_slice(&header);
    joined.extend_from_slice(&pa);
    joined.extend_from_slice(&pb);
    assert_eq!(read_archive(&joined).unwrap(), fifty_tensors()[..12].to_vec());
}

#[test]
fn compressed_factors_roundtrip_through_archive() {
    let k = ConvKernel::new(random_tensor(vec![6, 5, 3, 3], 3)).unwrap();
    let mut layers = Vec::new();
    for (kind, r) in [(DecompKind::Cp, 4), (DecompKind::Tt, 3)] {
        let target = kind.target(&k);
        let f = init::initial_factors(&target, &kind.rank_spec(r, target.order()), 1.0, 2).unwrap();
        layers.push(KernelFactors::from_target_factors(f, [6, 5, 3, 3]).unwrap());
    }
    let archive = factors_to_archive(&layers);
    let names: Vec<&str> = archive.names().collect();
    assert_eq!(
        names,
        ["layer0.factor0", "layer0.factor1", "layer0.factor2", "layer0.factor3", "layer1.core0", "layer1.core1", "layer1.core2"]
    );
    assert_eq!(archive.get("layer1.core1").unwrap().dims(), &[3, 3, 3, 3]);
    assert_eq!(archive.get("layer1.core2").unwrap().dims(), &[5, 3]);
    let back = factors_from_archive(&Archive::from_bytes(&archive.to_bytes().unwrap()).unwrap()).unwrap();
    assert_eq!(back.len(), 2);
    for (a, b) in layers.iter().zip(&back) {
        let ra = a.reconstruct_kernel();
        let rb = b.reconstruct_kernel();
        let err = ra.tensor().sub(rb.tensor()).unwrap().frobenius_norm() / ra.tensor().frobenius_norm();
        assert!(err < 1e-6, "{err}");
        assert_eq!(a.ranks(), b.ranks());
    }
    let again = factors_from_archive(&Archive::from_bytes(&factors_to_archive(&back).to_bytes().unwrap()).unwrap()).unwrap();
    assert_eq!(again, back);
}

#[test]
fn incomplete_factor_sets_are_rejected() {
    let mut a = Archive::new();
    a.push("layer0.factor0", DenseTensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap()).unwrap();
    assert!(factors_from_archive(&a).is_err());
    let mut b = Archive::new();
    b.push("weights", DenseTensor::new(vec![1], vec![1.0]).unwrap()).unwrap();
    assert!(factors_from_archive(&b).is_err());
}

#[test]
fn conv_layers_skip_non_kernel_entries() {
    let mut a = Archive::new();
    a.push("conv1", random_tensor(vec![2, 3, 3, 3], 1)).unwrap();
    a.push("bias", random_tensor(vec![2], 2)).unwrap();
    a.push("conv2", random_tensor(vec![4, 2, 1, 1], 3)).unwrap();
    let names: Vec<String> = conv_layers(&a).into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, ["conv1", "conv2"]);
}

fn arb_tensor() -> impl Strategy<Value = DenseTensor> {
    prop::collection::vec(1usize..5, 1..4).prop_flat_map(|dims| {
        let n: usize = dims.iter().product();
        prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), n)
            .prop_map(move |d| DenseTensor::new(dims.clone(), d.into_iter().map(f64::from).collect()).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn write_then_read_is_identity(ts in prop::collection::vec(arb_tensor(), 0..8)) {
        let named: Vec<(String, DenseTensor)> = ts.into_iter().enumerate().map(|(i, t)| (format!("n{i}"), t)).collect();
        let bytes = write_archive(&named).unwrap();
        let back = read_archive(&bytes).unwrap();
        prop_assert_eq!(back.len(), named.len());
        for ((_, a), (_, b)) in named.iter().zip(&back) {
            prop_assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        prop_assert_eq!(write_archive(&back).unwrap(), bytes);
    }
}
