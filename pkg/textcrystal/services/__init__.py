"""
Services package
"""