//! The whole toolchain on the `desk` preset in a temporary directory, driven
//! through the same entry point as the `motok` binary.

fn motok(args: &[&str]) -> i32 {
    println!("$ motok {}", args.join(" "));
    let code = motok::cli::run(std::iter::once("motok").chain(args.iter().copied()));
    if code != 0 {
        eprintln!("exit code {code}");
        std::process::exit(code);
    }
    code
}

fn main() -> std::io::Result<()> {
    let dir = tempfile::tempdir()?;
    let p = |name: &str| dir.path().join(name).to_string_lossy().into_owned();
    let cfg = motok::config::PipelineConfig::desk();
    std::fs::write(p("motok.json"), cfg.to_json().expect("serializable"))?;
    let conf = p("motok.json");
    let c = ["--config", conf.as_str()];
    let run = |rest: &[&str]| motok(&[&c[..], rest].concat());

    run(&["synth", "--kind", "squares", "--out", &p("videos"), "--count", "4"]);
    run(&["train", "--stage", "tokenizer", "--data", &p("videos")]);
    run(&["train", "--stage", "detok", "--data", &p("videos")]);
    for i in 0..4 {
        let video = p(&format!("videos/square_{i:03}.rvid"));
        run(&["tokenize", "--video", &video, "--out", &p(&format!("tokens/{i}.jsonl")), "--text", "a square moves"]);
    }
    run(&["inspect", "--file", &p("tokens/0.jsonl")]);
    run(&["train", "--stage", "lm", "--data", &p("tokens")]);
    run(&["detokenize", "--tokens", &p("tokens/0.jsonl"), "--out", &p("decoded.rvid"), "--delta-t", "5"]);
    run(&["generate", "--out", &p("generated.jsonl"), "--count", "2"]);
    run(&["inspect", "--file", &p("decoded.rvid")]);
    Ok(())
}
