use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use unireid::io::Container;

const SMALL: &str = "encoder.d = 16
encoder.heads = 2
encoder.depth = 2
ufla.resampler_heads = 2
ufla.queries = 4
ufla.prototypes = 16
ufla.head_hidden = 16
ufla.head_bottleneck = 8
train.batch_videos = 2
train.batch_images = 2
";

fn unireid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_unireid")).args(args).output().expect("spawn")
}

fn ok(args: &[&str]) {
    let out = unireid(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stderr.is_empty(), "stderr not empty: {}", String::from_utf8_lossy(&out.stderr));
}

fn code(args: &[&str]) -> i32 {
    unireid(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Self { dir: tempfile::tempdir().unwrap() };
        std::fs::write(f.path("small.cfg"), SMALL).unwrap();
        ok(&["gen-data", "--seed", "3", "--identities", "3", "--clips-per-id", "4", "--frames", "2", "--out", s(&f.path("data.bin"))]);
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn pretrain(&self, steps: &str, out: &str) {
        ok(&["pretrain", "--config", s(&self.path("small.cfg")), "--data", s(&self.path("data.bin")), "--steps", steps, "--seed", "1", "--out", s(&self.path(out))]);
    }
}

#[test]
fn gen_data_contract() {
    let f = Fixture::new();
    let a = f.path("a.bin");
    let b = f.path("b.bin");
    for p in [&a, &b] {
        ok(&["gen-data", "--seed", "5", "--identities", "16", "--clips-per-id", "8", "--frames", "1", "--out", s(p)]);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let c = Container::load(&a).unwrap();
    assert_eq!(c.u32s("meta.clips").unwrap(), &[128]);
    assert_eq!(c.u32s("meta.frames").unwrap(), &[1]);
    assert_eq!(c.get("clip.000000.video").unwrap().shape, vec![1, 16, 8, 3]);
    assert_eq!(code(&["gen-data", "--out", s(&f.path("data.bin/x"))]), 2);
}

#[test]
fn pretrain_contract() {
    let f = Fixture::new();
    f.pretrain("0", "init.ckpt");
    let csv = std::fs::read_to_string(f.path("init.ckpt.steps.csv")).unwrap();
    assert_eq!(csv, "step,loss_total,loss_f,loss_m,loss_r,loss_a,grad_norm\n");
    let init = Container::load(&f.path("init.ckpt")).unwrap();
    for e in init.entries().iter().filter(|e| e.name.starts_with("student.")) {
        let t = init.get(&e.name.replacen("student.", "teacher.", 1)).unwrap();
        assert_eq!(t.payload, e.payload, "{}", e.name);
    }

    f.pretrain("3", "a.ckpt");
    f.pretrain("3", "b.ckpt");
    assert_eq!(std::fs::read(f.path("a.ckpt")).unwrap(), std::fs::read(f.path("b.ckpt")).unwrap());
    let csv = std::fs::read_to_string(f.path("a.ckpt.steps.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert_ne!(std::fs::read(f.path("a.ckpt")).unwrap(), std::fs::read(f.path("init.ckpt")).unwrap());
}

#[test]
fn pretrain_rejections() {
    let f = Fixture::new();
    let bad = f.path("bad.cfg");
    std::fs::write(&bad, "ufla.nonsense = 1\n").unwrap();
    let data = f.path("data.bin");
    let out = f.path("x.ckpt");
    assert_eq!(code(&["pretrain", "--config", s(&bad), "--data", s(&data), "--steps", "1", "--out", s(&out)]), 1);
    std::fs::write(&bad, "ufla.teacher_temp = 0.5\n").unwrap();
    assert_eq!(code(&["pretrain", "--config", s(&bad), "--data", s(&data), "--steps", "1", "--out", s(&out)]), 1);
    assert_eq!(code(&["pretrain", "--config", s(&f.path("nope.cfg")), "--data", s(&data), "--steps", "1", "--out", s(&out)]), 2);
    assert_eq!(code(&["pretrain", "--config", s(&f.path("small.cfg")), "--data", s(&f.path("nope.bin")), "--steps", "1", "--out", s(&out)]), 2);
    assert!(!out.exists());

    std::fs::write(&bad, format!("{SMALL}ufla.lr = 1e38\nufla.clip = 1e38\n")).unwrap();
    let r = unireid(&["pretrain", "--config", s(&bad), "--data", s(&data), "--steps", "20", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("loss_total"));
}

#[test]
fn finetune_contract() {
    let f = Fixture::new();
    f.pretrain("2", "pre.ckpt");
    let args = |steps: &'static str, out: &'static str| -> Vec<String> {
        ["finetune", "--ckpt", s(&f.path("pre.ckpt")), "--data", s(&f.path("data.bin")), "--steps", steps, "--out", s(&f.path(out))]
            .iter()
            .map(|x| x.to_string())
            .collect()
    };
    let a0 = args("0", "ft0.ckpt");
    ok(&a0.iter().map(String::as_str).collect::<Vec<_>>());
    let pre = Container::load(&f.path("pre.ckpt")).unwrap();
    let ft = Container::load(&f.path("ft0.ckpt")).unwrap();
    assert!(ft.names().all(|n| !n.starts_with("student.") && !n.starts_with("head.")));
    assert_eq!(ft.get("classifier.weight").unwrap().shape, vec![3, 16]);
    let mut teacher = 0;
    for e in ft.entries().iter().filter(|e| e.name.starts_with("teacher.")) {
        assert_eq!(pre.get(&e.name).unwrap().payload, e.payload);
        teacher += 1;
    }
    assert!(teacher > 0);

    let a2 = args("2", "ft2.ckpt");
    ok(&a2.iter().map(String::as_str).collect::<Vec<_>>());

    let mut broken = pre.clone();
    broken.remove("teacher.encoder.pos");
    broken.remove("teacher.resampler.queries");
    broken.save(&f.path("broken.ckpt")).unwrap();
    let r = unireid(&["finetune", "--ckpt", s(&f.path("broken.ckpt")), "--data", s(&f.path("data.bin")), "--steps", "1", "--out", s(&f.path("x.ckpt"))]);
    assert_eq!(r.status.code(), Some(4));
    let msg = String::from_utf8_lossy(&r.stderr);
    assert!(msg.contains("teacher.encoder.pos") && msg.contains("teacher.resampler.queries"), "{msg}");
}

#[test]
fn eval_contract() {
    let f = Fixture::new();
    f.pretrain("1", "pre.ckpt");
    for p in ["image", "video", "mix"] {
        let a = f.path(&format!("{p}.csv"));
        let b = f.path(&format!("{p}2.csv"));
        for out in [&a, &b] {
            ok(&["eval", "--ckpt", s(&f.path("pre.ckpt")), "--data", s(&f.path("data.bin")), "--protocol", p, "--far", "0.1", "--out", s(out)]);
        }
        let text = std::fs::read_to_string(&a).unwrap();
        assert_eq!(text, std::fs::read_to_string(&b).unwrap());
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "metric,protocol,value");
        assert_eq!(lines.len(), 5);
        for l in &lines[1..] {
            let cols: Vec<&str> = l.split(',').collect();
            assert_eq!(cols[1], p);
            let v: f64 = cols[2].parse().unwrap();
            assert!((0.0..=1.0).contains(&v), "{l}");
        }
    }
    ok(&["gen-data", "--identities", "3", "--clips-per-id", "1", "--frames", "2", "--out", s(&f.path("one.bin"))]);
    assert_eq!(code(&["eval", "--ckpt", s(&f.path("pre.ckpt")), "--data", s(&f.path("one.bin")), "--protocol", "mix", "--out", s(&f.path("x.csv"))]), 5);
    assert_eq!(code(&["eval", "--ckpt", s(&f.path("pre.ckpt")), "--data", s(&f.path("data.bin")), "--protocol", "audio", "--out", s(&f.path("x.csv"))]), 1);
}

#[test]
fn viz_attn_contract() {
    let f = Fixture::new();
    f.pretrain("0", "pre.ckpt");
    let dir = f.path("attn");
    ok(&["viz-attn", "--ckpt", s(&f.path("pre.ckpt")), "--data", s(&f.path("data.bin")), "--index", "2", "--layer", "1", "--out", s(&dir)]);
    for h in 0..2 {
        let pgm = std::fs::read(dir.join(format!("layer1_head{h}.pgm"))).unwrap();
        assert!(pgm.starts_with(b"P5\n16 32\n255\n"), "{:?}", &pgm[..12]);
        let csv = std::fs::read_to_string(dir.join(format!("layer1_head{h}.csv"))).unwrap();
        assert_eq!(csv.lines().count(), 8);
    }
    assert!(!dir.join("layer1_head2.pgm").exists());
    assert_eq!(code(&["viz-attn", "--ckpt", s(&f.path("pre.ckpt")), "--data", s(&f.path("data.bin")), "--index", "12", "--out", s(&dir)]), 6);
}
