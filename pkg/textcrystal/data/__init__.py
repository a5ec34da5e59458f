"""
Bundled static data files
"""
