"""Serve the built-in wavelet denoiser over the DNZ1 pipe protocol.

Any executable that reads DNZ1 requests on stdin and writes responses on
stdout can drive D-AMP / D-VAMP; a BM3D binding is wrapped the same way
through ``dvamp.denoise.serve``.  Serving the in-process denoiser makes
the round trip easy to sanity-check: recovery should land within float32
quantization of the in-process run.

    dvamp recover src/dvamp/data/cameraman.pgm --algorithm d-vamp \\
        --external-denoiser "python demos/wavelet_denoiser_server.py"
    dvamp recover src/dvamp/data/cameraman.pgm --algorithm d-vamp
"""
from dvamp.denoise import serve, ti_wavelet_estimate


def denoise(image, sigma):
    return ti_wavelet_estimate(image.ravel(), sigma, multiplier=1.5,
                               rule="soft").reshape(image.shape)


if __name__ == "__main__":
    serve(denoise)
