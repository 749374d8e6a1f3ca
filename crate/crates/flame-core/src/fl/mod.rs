//! Built-in role programs and federated-averaging math.
