use clap::error::ErrorKind;

fn main() {
    let mut stdout = std::io::stdout();
    let code = match hammersim::cli::run(std::env::args_os(), &mut stdout) {
        Ok(code) => code,
        Err(e) => match e.downcast_ref::<clap::Error>() {
            Some(ce) => {
                let _ = ce.print();
                match ce.kind() {
                    ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                    _ => 1,
                }
            }
            None => {
                eprintln!("error: {e:#}");
                1
            }
        },
    };
    std::process::exit(code);
}
