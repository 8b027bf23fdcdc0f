fn main() {
    std::process::exit(rpctunnel_cli::main_entry(Some("tcpfilter")));
}
