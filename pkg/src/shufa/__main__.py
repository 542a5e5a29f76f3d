from shufa.cli import entrypoint

entrypoint()
