"""Print the full-size layer tables for late fusion and hyperdense connectivity,
plus parameter counts for both inception variants."""

from mdunet.network import NetworkConfig, network_parameter_count, shape_table

for fusion in ("late", "hyperdense"):
    cfg = NetworkConfig(num_streams=4, fusion=fusion)
    print(f"--- {fusion}")
    print(shape_table(cfg).to_text())
    for variant in ("standard", "asymmetric"):
        n = network_parameter_count(NetworkConfig(num_streams=4, fusion=fusion, module_variant=variant))
        print(f"parameters ({variant}): {n:,}")
    print()
