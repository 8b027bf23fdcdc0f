//! Throwaway PKI for trying the tunnel locally. Not for production use.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use rcgen::{
    BasicConstraints, CertificateParams, DnType, ExtendedKeyUsagePurpose, IsCa, KeyPair,
    KeyUsagePurpose,
};

#[derive(Debug, Clone)]
pub struct TestCertPaths {
    pub ca_cert: PathBuf,
    pub server_cert: PathBuf,
    pub server_key: PathBuf,
    pub client_cert: PathBuf,
    pub client_key: PathBuf,
}

impl fmt::Display for TestCertPaths {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "ca:          {}", self.ca_cert.display())?;
        writeln!(f, "server cert: {}", self.server_cert.display())?;
        writeln!(f, "server key:  {}", self.server_key.display())?;
        writeln!(f, "client cert: {}", self.client_cert.display())?;
        write!(f, "client key:  {}", self.client_key.display())
    }
}

/// Writes `ca.pem`, `server.pem`, `server-key.pem`, `client.pem` and
/// `client-key.pem` into `dir`. The server certificate covers `sans`.
pub fn generate_test_certs(dir: &Path, sans: &[String]) -> anyhow::Result<TestCertPaths> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;

    let mut ca_params = CertificateParams::new(Vec::<String>::new())?;
    ca_params.is_ca = IsCa::Ca(BasicConstraints::Unconstrained);
    ca_params.distinguished_name.push(DnType::CommonName, "rpctunnel test CA");
    ca_params.key_usages = vec![KeyUsagePurpose::KeyCertSign, KeyUsagePurpose::CrlSign];
    let ca_key = KeyPair::generate()?;
    let ca = ca_params.self_signed(&ca_key)?;

    let mut server_params = CertificateParams::new(sans.to_vec())?;
    server_params.distinguished_name.push(DnType::CommonName, "rpctunnel gateway");
    server_params.extended_key_usages = vec![ExtendedKeyUsagePurpose::ServerAuth];
    let server_key = KeyPair::generate()?;
    let server = server_params.signed_by(&server_key, &ca, &ca_key)?;

    let mut client_params = CertificateParams::new(Vec::<String>::new())?;
    client_params.distinguished_name.push(DnType::CommonName, "rpctunnel client");
    client_params.extended_key_usages = vec![ExtendedKeyUsagePurpose::ClientAuth];
    let client_key = KeyPair::generate()?;
    let client = client_params.signed_by(&client_key, &ca, &ca_key)?;

    let paths = TestCertPaths {
        ca_cert: dir.join("ca.pem"),
        server_cert: dir.join("server.pem"),
        server_key: dir.join("server-key.pem"),
        client_cert: dir.join("client.pem"),
        client_key: dir.join("client-key.pem"),
    };
    let write = |p: &Path, pem: String| fs::write(p, pem).with_context(|| format!("writing {}", p.display()));
    write(&paths.ca_cert, ca.pem())?;
    write(&paths.server_cert, server.pem())?;
    write(&paths.server_key, server_key.serialize_pem())?;
    write(&paths.client_cert, client.pem())?;
    write(&paths.client_key, client_key.serialize_pem())?;
    Ok(paths)
}
