"""zsecc: in-place zero-space ECC for 8-bit quantized CNN weights."""
