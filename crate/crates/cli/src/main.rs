use std::process::ExitCode;

use flash_sim_cli::{configure_threads, execute, parse_config, CliError};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let rc = match parse_config(std::env::args_os()) {
        Ok(rc) => rc,
        Err(CliError::Clap(e)) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("{e}");
        return ExitCode::from(2);
    }
    match execute(&rc) {
        Ok(m) => {
            println!(
                "completed {} rounds: final accuracy {}, uplink {} bits, downlink {} bits, {:.3e} FLOPs -> {}",
                m.rounds_completed,
                m.final_test_acc.map_or("n/a".into(), |a| format!("{:.4}", a)),
                m.total_uplink_bits,
                m.total_downlink_bits,
                m.total_flops,
                rc.out.display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
