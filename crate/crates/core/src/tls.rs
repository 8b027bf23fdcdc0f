//! rustls configuration for the gateway (server) and the tunnel client.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rustls::client::danger::{HandshakeSignatureValid, ServerCertVerified, ServerCertVerifier};
use rustls::crypto::{ring, CryptoProvider, WebPkiSupportedAlgorithms};
use rustls::pki_types::pem::PemObject;
use rustls::pki_types::{CertificateDer, PrivateKeyDer, ServerName, UnixTime};
use rustls::server::WebPkiClientVerifier;
use rustls::{ClientConfig, DigitallySignedStruct, RootCertStore, ServerConfig, SignatureScheme};
use thiserror::Error;

#[derive(Debug, Error)]
#[error("TLS configuration: {0}")]
pub struct TlsConfigError(pub String);

fn provider() -> Arc<CryptoProvider> {
    Arc::new(ring::default_provider())
}

pub fn load_certs(path: &Path) -> Result<Vec<CertificateDer<'static>>, TlsConfigError> {
    let certs = CertificateDer::pem_file_iter(path)
        .and_then(|it| it.collect::<Result<Vec<_>, _>>())
        .map_err(|e| TlsConfigError(format!("{}: {e}", path.display())))?;
    if certs.is_empty() {
        return Err(TlsConfigError(format!("{}: no certificates found", path.display())));
    }
    Ok(certs)
}

pub fn load_private_key(path: &Path) -> Result<PrivateKeyDer<'static>, TlsConfigError> {
    PrivateKeyDer::from_pem_file(path).map_err(|e| TlsConfigError(format!("{}: {e}", path.display())))
}

fn root_store(ca_file: &Path) -> Result<RootCertStore, TlsConfigError> {
    let mut roots = RootCertStore::empty();
    for cert in load_certs(ca_file)? {
        roots.add(cert).map_err(|e| TlsConfigError(format!("{}: {e}", ca_file.display())))?;
    }
    Ok(roots)
}

/// Gateway-side TLS settings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TlsServerConfig {
    pub certificate_chain: PathBuf,
    pub private_key: PathBuf,
    /// Reject clients that do not present a certificate signed by `client_ca`.
    pub require_client_cert: bool,
    pub client_ca: Option<PathBuf>,
}

impl TlsServerConfig {
    pub fn new(certificate_chain: impl Into<PathBuf>, private_key: impl Into<PathBuf>) -> Self {
        TlsServerConfig {
            certificate_chain: certificate_chain.into(),
            private_key: private_key.into(),
            require_client_cert: false,
            client_ca: None,
        }
    }

    pub fn build(&self) -> Result<Arc<ServerConfig>, TlsConfigError> {
        let certs = load_certs(&self.certificate_chain)?;
        let key = load_private_key(&self.private_key)?;
        let builder = ServerConfig::builder_with_provider(provider())
            .with_safe_default_protocol_versions()
            .map_err(|e| TlsConfigError(e.to_string()))?;
        let builder = if self.require_client_cert {
            let ca = self.client_ca.as_deref().ok_or_else(|| {
                TlsConfigError("client certificates required but no client CA configured".into())
            })?;
            let verifier =
                WebPkiClientVerifier::builder_with_provider(Arc::new(root_store(ca)?), provider())
                    .build()
                    .map_err(|e| TlsConfigError(e.to_string()))?;
            builder.with_client_cert_verifier(verifier)
        } else {
            builder.with_no_client_auth()
        };
        let mut cfg =
            builder.with_single_cert(certs, key).map_err(|e| TlsConfigError(e.to_string()))?;
        cfg.alpn_protocols = vec![b"http/1.1".to_vec()];
        Ok(Arc::new(cfg))
    }
}

/// Tunnel-side TLS settings.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClientTlsOptions {
    /// PEM trust anchors; the bundled web PKI roots are used when unset.
    pub ca_file: Option<PathBuf>,
    pub insecure_skip_verify: bool,
    /// Certificate chain and key presented for mutual authentication.
    pub client_identity: Option<(PathBuf, PathBuf)>,
}

impl ClientTlsOptions {
    pub fn build(&self) -> Result<Arc<ClientConfig>, TlsConfigError> {
        let builder = ClientConfig::builder_with_provider(provider())
            .with_safe_default_protocol_versions()
            .map_err(|e| TlsConfigError(e.to_string()))?;
        let builder = if self.insecure_skip_verify {
            builder
                .dangerous()
                .with_custom_certificate_verifier(Arc::new(AcceptAnyCert(
                    provider().signature_verification_algorithms,
                )))
        } else {
            let roots = match &self.ca_file {
                Some(path) => root_store(path)?,
                None => RootCertStore { roots: webpki_roots::TLS_SERVER_ROOTS.to_vec() },
            };
            builder.with_root_certificates(roots)
        };
        let mut cfg = match &self.client_identity {
            Some((chain, key)) => builder
                .with_client_auth_cert(load_certs(chain)?, load_private_key(key)?)
                .map_err(|e| TlsConfigError(e.to_string()))?,
            None => builder.with_no_client_auth(),
        };
        cfg.alpn_protocols = vec![b"http/1.1".to_vec()];
        Ok(Arc::new(cfg))
    }
}

#[derive(Debug)]
struct AcceptAnyCert(WebPkiSupportedAlgorithms);

impl ServerCertVerifier for AcceptAnyCert {
    fn verify_server_cert(
        &self,
        _end_entity: &CertificateDer<'_>,
        _intermediates: &[CertificateDer<'_>],
        _server_name: &ServerName<'_>,
        _ocsp_response: &[u8],
        _now: UnixTime,
    ) -> Result<ServerCertVerified, rustls::Error> {
        Ok(ServerCertVerified::assertion())
    }

    fn verify_tls12_signature(
        &self,
        message: &[u8],
        cert: &CertificateDer<'_>,
        dss: &DigitallySignedStruct,
    ) -> Result<HandshakeSignatureValid, rustls::Error> {
        rustls::crypto::verify_tls12_signature(message, cert, dss, &self.0)
    }

    fn verify_tls13_signature(
        &self,
        message: &[u8],
        cert: &CertificateDer<'_>,
        dss: &DigitallySignedStruct,
    ) -> Result<HandshakeSignatureValid, rustls::Error> {
        rustls::crypto::verify_tls13_signature(message, cert, dss, &self.0)
    }

    fn supported_verify_schemes(&self) -> Vec<SignatureScheme> {
        self.0.supported_schemes()
    }
}
