fn main() {
    std::process::exit(trafficgraph::pipeline::run(std::env::args_os()));
}
