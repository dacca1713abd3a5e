use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tempfile::TempDir;

use signcut::decompose::expand;
use signcut::io::{read_ppm, read_raw, read_scd, write_raw, DType};
use signcut::metrics::{read_curve_csv, relative_error};
use signcut::DenseTensor;

fn signcut(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_signcut"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Value of `key=...` on stdout.
fn field(o: &Output, key: &str) -> f64 {
    stdout(o)
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key} in {:?}", stdout(o)))
        .parse()
        .unwrap()
}

struct Dir(TempDir);

impl Dir {
    fn new() -> Self {
        Dir(tempfile::tempdir().unwrap())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.0.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).to_str().unwrap().to_owned()
    }

    fn tensor(&self, name: &str, t: &DenseTensor, dtype: DType) -> String {
        std::fs::write(self.path(name), write_raw(t, dtype)).unwrap();
        self.s(name)
    }
}

fn normal(shape: Vec<usize>, seed: u64) -> DenseTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    DenseTensor::new(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn load(path: &Path) -> DenseTensor {
    read_raw(&std::fs::read(path).unwrap()).unwrap().0
}

#[test]
fn width_reproduces_reference_widths() {
    let o = signcut(&["width", "--shape", "1024x4096", "--rate", "0.5"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "6512");
    let o = signcut(&["width", "--shape", "32000x4096", "--rate", "0.25"]);
    assert_eq!(stdout(&o).trim(), "14511");
    let o = signcut(&["width", "--shape", "4096x4096", "--rate", "0.4375"]);
    assert_eq!(stdout(&o).trim(), "14280");
}

#[test]
fn oracle_on_checkerboard() {
    let dir = Dir::new();
    let a = DenseTensor::matrix(2, 2, vec![1.0, -1.0, -1.0, 1.0]).unwrap();
    let path = dir.tensor("a.dten", &a, DType::F64);
    let o = signcut(&["oracle", &path]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "value=4");
}

#[test]
fn width_zero_decomposition() {
    let dir = Dir::new();
    let input = dir.tensor("a.dten", &normal(vec![5, 6], 1), DType::F64);
    let o = signcut(&["decompose", "--width", "0", &input, &dir.s("z.scd")]);
    assert!(o.status.success());
    assert_eq!(field(&o, "width"), 0.0);
    assert_eq!(field(&o, "rel_err"), 1.0);
    let d = read_scd(&std::fs::read(dir.path("z.scd")).unwrap()).unwrap();
    assert_eq!(d.width(), 0);

    let o = signcut(&["reconstruct", &dir.s("z.scd"), &dir.s("z.dten")]);
    assert!(o.status.success());
    assert_eq!(load(&dir.path("z.dten")), DenseTensor::zeros(vec![5, 6]).unwrap());
}

#[test]
fn rate_resolves_width_on_large_shape() {
    let dir = Dir::new();
    let input = dir.tensor("big.dten", &DenseTensor::zeros(vec![1024, 4096]).unwrap(), DType::F32);
    let o = signcut(&[
        "decompose", "--rate", "0.5", "--method", "greedy", "--dry-run", &input, &dir.s("o.scd"),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(field(&o, "width"), 6512.0);
    assert!(field(&o, "rate") <= 0.5);
    assert!(!dir.path("o.scd").exists());
}

#[test]
fn printed_error_matches_reconstruction() {
    let dir = Dir::new();
    let a = normal(vec![20, 30], 2);
    let input = dir.tensor("a.dten", &a, DType::F64);
    for (method, bits) in [("greedy", "32"), ("lstsq", "64"), ("greedy", "64")] {
        let o = signcut(&[
            "decompose", "--width", "12", "--method", method, "--coeff-bits", bits, &input,
            &dir.s("a.scd"),
        ]);
        assert!(o.status.success());
        let printed = field(&o, "rel_err");
        let o = signcut(&["reconstruct", &dir.s("a.scd"), &dir.s("r.dten")]);
        assert!(o.status.success());
        let err = relative_error(&a, &load(&dir.path("r.dten")), None).unwrap();
        assert!((printed - err).abs() < 1e-9, "{method}/{bits}: {printed} vs {err}");
    }
}

#[test]
fn truncated_reconstruction_drops_the_tail() {
    let dir = Dir::new();
    let a = normal(vec![9, 14], 3);
    let input = dir.tensor("a.dten", &a, DType::F64);
    assert!(signcut(&["decompose", "--width", "10", &input, &dir.s("a.scd")]).status.success());
    assert!(signcut(&["reconstruct", &dir.s("a.scd"), &dir.s("full.dten")]).status.success());
    assert!(signcut(&["reconstruct", "--truncate", "4", &dir.s("a.scd"), &dir.s("head.dten")])
        .status
        .success());
    let d = read_scd(&std::fs::read(dir.path("a.scd")).unwrap()).unwrap();
    let full = load(&dir.path("full.dten"));
    let head = load(&dir.path("head.dten"));
    // full - head must be the expansion of terms 4..10
    let mut tail = d.truncated(10);
    let zeros = [0.0; 4];
    let coefs: Vec<f64> = zeros.iter().chain(&d.coefficients()[4..]).copied().collect();
    tail.set_coefficients(coefs).unwrap();
    let tail = expand(&tail);
    for ((f, h), t) in full.data().iter().zip(head.data()).zip(tail.data()) {
        assert!((f - h - t).abs() < 1e-12);
    }
}

#[test]
fn ppm_pipeline() {
    let dir = Dir::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut img = b"P6\n10 6\n255\n".to_vec();
    img.extend((0..10 * 6 * 3).map(|_| rng.random::<u8>()));
    std::fs::write(dir.path("in.ppm"), &img).unwrap();
    for mode in ["signs", "scalars"] {
        let o = signcut(&[
            "decompose", "--rate", "0.5", "--channel-mode", mode, &dir.s("in.ppm"), &dir.s("x.scd"),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(field(&o, "rate") <= 0.5);
        let o = signcut(&["reconstruct", &dir.s("x.scd"), &dir.s("out.ppm")]);
        assert!(o.status.success());
        let out = read_ppm(&std::fs::read(dir.path("out.ppm")).unwrap()).unwrap();
        assert_eq!(out.shape(), &[6, 10, 3]);
        let d = read_scd(&std::fs::read(dir.path("x.scd")).unwrap()).unwrap();
        for (x, y) in out.data().iter().zip(expand(&d).data()) {
            assert_eq!(*x, y.clamp(0.0, 255.0).round());
        }
    }
}

#[test]
fn curve_csv() {
    let dir = Dir::new();
    let a = normal(vec![8, 12], 5);
    let input = dir.tensor("a.dten", &a, DType::F64);
    let o = signcut(&[
        "decompose", "--width", "6", "--coeff-bits", "64", "--curve", &dir.s("dec.csv"), &input,
        &dir.s("a.scd"),
    ]);
    assert!(o.status.success());
    let o = signcut(&["curve", &input, &dir.s("a.scd"), &dir.s("post.csv")]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(dir.path("post.csv")).unwrap();
    assert!(text.starts_with("width,compression_rate,relative_error\n"));
    let during = read_curve_csv(std::fs::File::open(dir.path("dec.csv")).unwrap()).unwrap();
    let after = read_curve_csv(text.as_bytes()).unwrap();
    assert_eq!(during.len(), 7);
    assert_eq!(after.len(), 7);
    for (x, y) in during.iter().zip(&after) {
        assert_eq!(x.k, y.k);
        assert_eq!(x.p_k, y.p_k);
        assert!((x.r_k - y.r_k).abs() < 1e-9);
    }
    assert_eq!(after[0].r_k, 1.0);
}

#[test]
fn quantize_reports_error() {
    let dir = Dir::new();
    let exact = DenseTensor::matrix(1, 4, vec![1.0, -0.5, 0.25, 1024.0]).unwrap();
    let input = dir.tensor("a.dten", &exact, DType::F64);
    for format in ["bf16", "f16"] {
        let o = signcut(&["quantize", "--format", format, &input, &dir.s("q.dten")]);
        assert!(o.status.success());
        assert_eq!(field(&o, "rel_err"), 0.0);
        assert_eq!(field(&o, "saturated"), 0.0);
        assert_eq!(load(&dir.path("q.dten")), exact);
    }
    let big = DenseTensor::matrix(1, 2, vec![1e6, 1.0]).unwrap();
    let input = dir.tensor("b.dten", &big, DType::F64);
    let o = signcut(&["quantize", "--format", "f16", &input, &dir.s("q.dten")]);
    assert_eq!(field(&o, "saturated"), 1.0);
}

#[test]
fn exit_codes() {
    let dir = Dir::new();
    let input = dir.tensor("a.dten", &normal(vec![4, 4], 6), DType::F64);
    let code = |args: &[&str]| signcut(args).status.code();

    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&["--version"]), Some(0));
    // missing files and damaged inputs
    assert_eq!(code(&["oracle", &dir.s("missing.dten")]), Some(2));
    std::fs::write(dir.path("junk.scd"), b"SCD1\x02").unwrap();
    assert_eq!(code(&["reconstruct", &dir.s("junk.scd"), &dir.s("o.dten")]), Some(2));
    // invalid configuration
    assert_eq!(code(&["decompose", &input, &dir.s("o.scd")]), Some(3));
    assert_eq!(code(&["decompose", "--width", "2", "--rate", "0.1", &input, &dir.s("o.scd")]), Some(3));
    assert_eq!(code(&["decompose", "--rate", "1.5", &input, &dir.s("o.scd")]), Some(3));
    assert_eq!(code(&["decompose", "--width", "2", "--restarts", "0", &input, &dir.s("o.scd")]), Some(3));
    assert_eq!(code(&["decompose", "--width", "2", "--coeff-bits", "16", &input, &dir.s("o.scd")]), Some(3));
    assert_eq!(
        code(&["decompose", "--width", "2", "--channel-mode", "scalars", &input, &dir.s("o.scd")]),
        Some(3)
    );
    assert_eq!(code(&["oracle", &dir.tensor("big.dten", &normal(vec![20, 20], 0), DType::F64)]), Some(3));
    assert_eq!(code(&["bogus"]), Some(3));
    // errors go to stderr, not stdout
    let o = signcut(&["oracle", &dir.s("missing.dten")]);
    assert!(o.stdout.is_empty());
    assert!(!o.stderr.is_empty());
}

#[test]
fn seeds_change_output_deterministically() {
    let dir = Dir::new();
    let input = dir.tensor("a.dten", &normal(vec![16, 16], 7), DType::F64);
    let run = |seed: &str, out: &str| {
        let o = signcut(&["decompose", "--width", "8", "--seed", seed, &input, &dir.s(out)]);
        assert!(o.status.success());
        std::fs::read(dir.path(out)).unwrap()
    };
    assert_eq!(run("0x10", "a.scd"), run("16", "b.scd"));
    assert_eq!(run("3", "c.scd"), run("3", "d.scd"));
}
