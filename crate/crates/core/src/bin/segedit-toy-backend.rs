//! Serves one request of the external backend protocol with the toy
//! backends: reads the request from stdin, writes the reply to stdout.

use std::io::{Read, Write};

fn main() -> std::io::Result<()> {
    let mut request = Vec::new();
    std::io::stdin().read_to_end(&mut request)?;
    let reply = segedit_core::backend::serve_toy_request(&request);
    std::io::stdout().write_all(&reply)
}
