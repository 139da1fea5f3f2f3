//! Reference backend: reads a restoration request from the path given as
//! the only argument and prints the response JSON on stdout.

use std::path::PathBuf;
use std::process::ExitCode;

use handcraft_core::protocol::{read_json, stub_restore, RestorationRequest};

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let [path] = args.as_slice() else {
        eprintln!("usage: handcraft-stub-backend <request.json>");
        return ExitCode::from(2);
    };
    let result = read_json::<RestorationRequest>(&PathBuf::from(path)).and_then(|r| stub_restore(&r));
    match result {
        Ok(response) => {
            println!("{}", serde_json::to_string(&response).expect("response serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("handcraft-stub-backend: {e}");
            ExitCode::from(4)
        }
    }
}
