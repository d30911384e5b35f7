author = """molfusion developers"""
email = 'molfusion-dev@users.noreply.github.com'
version = '0.1.0'
