"""Regenerate the bundled architecture spec files from the builders."""
from idforge.archspecs import controlnet_spec, sd15_spec, toy_spec
from idforge.profiler import bundled_spec_path, dump_spec

SPECS = {"sd15": sd15_spec, "sd15_controlnet": controlnet_spec, "toy": toy_spec}


def main():
    for name, build in SPECS.items():
        path = bundled_spec_path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(dump_spec(build()))
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
